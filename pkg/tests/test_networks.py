import pytest
import torch

from tissuebench.architectures import FAMILIES, INPUT, ArchitectureSpec, LayerSpec, build_spec, count_parameters
from tissuebench.networks import SegmentationNetwork, instantiate, parameter_count


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("dim", ["2D", "3D"])
def test_parameter_count_matches_spec(family, dim):
    spec = build_spec(family, dim, 1)
    assert parameter_count(SegmentationNetwork(spec)) == count_parameters(spec)


@pytest.mark.parametrize("family", FAMILIES)
def test_two_d_forward_on_zeros(family):
    spec = build_spec(family, "2D", 2)
    model = instantiate(spec, seed=0)
    model.eval()
    with torch.no_grad():
        probabilities = model(torch.zeros((2, 2) + spec.input_size))
    assert probabilities.shape == (2, 4) + spec.output_size
    assert torch.isfinite(probabilities).all()
    assert torch.allclose(probabilities.sum(dim=1), torch.ones(1), atol=1e-5)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("dim", ["2D", "3D"])
def test_intermediate_outputs_are_released_after_their_last_reader(family, dim):
    spec = build_spec(family, dim, 1, {"width_scale": 0.125})
    network = SegmentationNetwork(spec)
    released = [name for names in network.release_after for name in names]
    assert sorted(released) == sorted([INPUT] + [layer.name for layer in spec.layers[:-1]])
    for index, names in enumerate(network.release_after):
        assert set(names) <= set(spec.layers[index].inputs)
        for later in spec.layers[index + 1 :]:
            assert not set(names) & set(later.inputs), (later.name, names)


@pytest.mark.parametrize("family", FAMILIES)
def test_three_d_forward_shapes_at_reduced_width(family):
    spec = build_spec(family, "3D", 1, {"width_scale": 0.125})
    model = instantiate(spec, seed=1)
    model.eval()
    with torch.no_grad():
        probabilities = model(torch.randn((1, 1) + spec.input_size))
    assert probabilities.shape == (1, 4) + spec.output_size
    assert torch.allclose(probabilities.sum(dim=1), torch.ones(1), atol=1e-5)


def test_log_probabilities_match_softmax():
    spec = build_spec("KK", "2D", 1, {"width_scale": 0.25})
    model = instantiate(spec, seed=2)
    x = torch.randn((3, 1) + spec.input_size)
    with torch.no_grad():
        assert torch.allclose(model.log_probabilities(x).exp(), model(x), atol=1e-6)


def test_instantiation_is_seeded():
    spec = build_spec("UResNet", "2D", 1, {"width_scale": 0.25})
    first = instantiate(spec, seed=5).state_dict()
    torch.manual_seed(1234)
    second = instantiate(spec, seed=5).state_dict()
    third = instantiate(spec, seed=6).state_dict()
    assert all(torch.equal(first[key], second[key]) for key in first)
    assert not all(torch.equal(first[key], third[key]) for key in first)


def test_biases_start_at_zero():
    model = instantiate(build_spec("DM", "2D", 1, {"width_scale": 0.25}), seed=0)
    for name, parameter in model.named_parameters():
        if name.endswith(".bias") and "prelu" not in name:
            assert torch.count_nonzero(parameter) == 0, name


def test_gradients_match_finite_differences():
    spec = ArchitectureSpec(
        family="DM",
        dimensionality="3D",
        in_channels=1,
        num_classes=4,
        layers=(
            LayerSpec("conv1", "conv", ("input",), kernel=(3, 3, 3), channels_out=3),
            LayerSpec("prelu1", "activation", ("conv1",), activation="prelu"),
            LayerSpec("head", "softmax_head", ("prelu1",), kernel=(1, 1, 1), channels_out=4),
        ),
        input_size=(5, 5, 5),
        output_size=(3, 3, 3),
    )
    model = instantiate(spec, seed=3).double()
    x = torch.randn((1, 1, 5, 5, 5), dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(model, (x,), eps=1e-6, atol=1e-6, rtol=1e-3)

    targets = torch.randint(0, 4, (1, 3, 3, 3))
    weight = model.blocks["conv1"].weight

    def loss():
        return torch.nn.functional.nll_loss(model.log_probabilities(x.detach()), targets)

    model.zero_grad()
    loss().backward()
    analytic = weight.grad[0, 0, 1, 1, 1].item()
    with torch.no_grad():
        weight[0, 0, 1, 1, 1] += 1e-6
        upper = loss().item()
        weight[0, 0, 1, 1, 1] -= 2e-6
        lower = loss().item()
        weight[0, 0, 1, 1, 1] += 1e-6
    numeric = (upper - lower) / 2e-6
    assert abs(numeric - analytic) <= 1e-3 * max(abs(analytic), 1e-8) + 1e-9

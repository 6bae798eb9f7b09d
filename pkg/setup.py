import io

from setuptools import find_packages, setup

# Read the README.md file
with io.open("README.md", "r", encoding="utf-8") as f:
    long_description = f.read()

install_requires = [
    "numpy==1.26.4",
    "torch==2.6.0",
    "h5py==3.11.0",
    "Pillow==10.3.0",
    "nibabel==5.2.1",
    "scipy==1.13.1",
    "matplotlib==3.9.0",
]

extras_require = {
    "test": ["pytest==8.2.2"],
}

setup(
    name="TissueBench",
    version="0.3",
    packages=find_packages(include=["tissuebench", "tissuebench.*"]),
    install_requires=install_requires,
    long_description=long_description,
    long_description_content_type="text/markdown",
    extras_require=extras_require,
    python_requires=">=3.9",
)

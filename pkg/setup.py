import os

from setuptools import find_packages, setup

with open(os.path.join("simfree_soc", "version.txt")) as file_handler:
    __version__ = file_handler.read().strip()


long_description = """

# simfree-soc

Training of feedback controls for stochastic optimal control problems with a
simulation-free policy gradient: one forward Euler-Maruyama simulation and
per-step parameter vector-Jacobian products, no backpropagation through the
SDE solution. Includes a backprop-through-the-solver baseline, an off-policy
(Girsanov-reweighted) objective, Follmer-process sampling with unbiased
importance weights and log-normalizing-constant estimates, and analytic
ground truth for linear OU and LQR problems.

## Example

```bash
simfree-soc train --preset linear-ou --out runs/ou
simfree-soc eval --preset linear-ou --checkpoint runs/ou/ckpt_5000.bin --out runs/ou
simfree-soc sample --preset gaussian-follmer --out runs/gauss
```

"""  # noqa:E501


setup(
    name="simfree-soc",
    packages=[package for package in find_packages() if package.startswith("simfree_soc")],
    package_data={"simfree_soc": ["py.typed", "version.txt"]},
    install_requires=[
        "numpy",
        "torch>=1.11",
        # For reading logs and writing sample files
        "pandas",
        # Experiment configs
        "pyyaml",
    ],
    extras_require={
        "tests": [
            # Run tests and coverage
            "pytest",
            "pytest-cov",
            "pytest-env",
            "pytest-xdist",
            # Type check
            "pytype",
            # Lint code
            "flake8>=3.8",
            # Find likely bugs
            "flake8-bugbear",
            # Sort imports
            "isort>=5.0",
            # Reformat
            "black",
            # Statistical tests and matrix exponentials
            "scipy>=1.4.1",
        ],
        "docs": [
            "sphinx",
            "sphinx-autobuild",
            "sphinx-rtd-theme",
            # For spelling
            "sphinxcontrib.spelling",
            # Type hints support
            "sphinx-autodoc-typehints",
            # Copy button for code snippets
            "sphinx_copybutton",
        ],
        "extra": [
            # Tensorboard support
            "tensorboard>=2.9.1",
        ],
    },
    entry_points={"console_scripts": ["simfree-soc=simfree_soc.cli.main:main"]},
    description="Simulation-free policy gradients for stochastic optimal control and Follmer sampling.",
    keywords="stochastic-optimal-control sde policy-gradient importance-sampling follmer pytorch",
    license="MIT",
    long_description=long_description,
    long_description_content_type="text/markdown",
    version=__version__,
    python_requires=">=3.7",
    # PyPI package information.
    classifiers=[
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.7",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
    ],
)

# python setup.py sdist
# python setup.py bdist_wheel

from setuptools import find_packages, setup

setup(
    name="NAAS",
    version="0.1",
    packages=find_packages(exclude=["tests"]),
    install_requires=[
        "numpy",
        "scipy",
        "matplotlib",
        "seaborn",
        "tqdm",
        "mergedeep",
    ],
    extras_require={"test": ["pytest"]},
    entry_points={"console_scripts": ["naas = NAAS.cli:main"]},
    python_requires=">=3.10",
    author="Joshua J Wakefield",
    author_email="sgjwakef@liverpool.ac.uk",
    description="Annealed adjoint diffusion samplers for unnormalised densities.",
    license="MIT",
    keywords="diffusion sampler stochastic optimal control adjoint matching",
)

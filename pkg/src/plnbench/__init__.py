"""Count-model benchmarking: PLN, l1-penalized Poisson regression and network recovery."""

from importlib import resources

__version__ = "0.1.0"


def fixture_path(name: str = "synthetic_30x10.csv") -> str:
    """Path of a count table bundled with the package."""
    return str(resources.files(__package__).joinpath("fixtures", name))

"""Bundled data fixtures."""

from importlib.resources import files


def gss_path():
    """Path to the bundled General Social Survey cross-classification.

    Columns: schooling (4 levels), siblings (5), happiness (3), count;
    60 rows of pattern counts totalling 1517 respondents.
    """
    return files("ordscr") / "data" / "gss.csv"

import math


def format_percentage(value: float, decimals: int = 1) -> str:
    return f"{value:.{decimals}f}%"


def format_rate(fraction: float, decimals: int = 1) -> str:
    """Fraction in [0, 1] shown as a percentage; files keep the fraction."""
    if fraction is None or (isinstance(fraction, float) and math.isnan(fraction)):
        return "n/a"
    return format_percentage(100.0 * fraction, decimals)


def format_db(value: float, decimals: int = 2) -> str:
    return f"{value:.{decimals}f} dB"


def format_delta(fraction: float, decimals: int = 1) -> str:
    """Signed change of a rate, in percentage points."""
    points = 100.0 * fraction
    prefix = "+" if points > 0 else ""
    return f"{prefix}{points:.{decimals}f} pts"

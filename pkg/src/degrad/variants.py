"""Algorithm variants."""

from __future__ import annotations

import enum

from .errors import DomainError

__all__ = ["Variant", "parse_variant"]


class Variant(str, enum.Enum):
    GD = "gd"
    DGD = "dgd"
    DIFFUSION_ATC = "diffusion_atc"
    DIFFUSION_CTA = "diffusion_cta"
    FEDERATED = "federated"

    @property
    def is_diffusion(self) -> bool:
        """Gradient step is premultiplied by W (Z = W)."""
        return self in (Variant.DIFFUSION_ATC, Variant.DIFFUSION_CTA, Variant.FEDERATED)


_ALIASES = {
    "diffusion": Variant.DIFFUSION_ATC,
    "atc": Variant.DIFFUSION_ATC,
    "cta": Variant.DIFFUSION_CTA,
    "fedavg": Variant.FEDERATED,
}


def parse_variant(value: Variant | str) -> Variant:
    if isinstance(value, Variant):
        return value
    key = str(value).strip().lower().replace("-", "_")
    if key in _ALIASES:
        return _ALIASES[key]
    try:
        return Variant(key)
    except ValueError:
        raise DomainError(f"unknown algorithm variant {value!r}") from None

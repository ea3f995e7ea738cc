"""Weight-to-device mapping and conductance-noise model.

An M-bit weight is stored on M/N devices of N bits each; device j carries the
j-th base-2^N digit of the quantized magnitude code.  Programming error on
each device conductance is zero-mean Gaussian with standard deviation
``sigma_d`` (conductance-level units), which induces an additive weight
perturbation with a closed-form standard deviation.

Two sampling paths produce identically distributed perturbations: sampling
every device's error individually, or one Gaussian per weight at the
composed std.  Both are pure functions of an explicit RNG stream.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError
from .streams import substream

# sigma_d above this is the device-aging regime; reports flag it.
NORMAL_SIGMA_D_MAX = 0.4


@dataclass(frozen=True)
class QuantSpec:
    """Bit widths of the weight code (m_bits) and of one device (n_bits)."""

    m_bits: int = 8
    n_bits: int = 2

    def __post_init__(self):
        if self.m_bits < 1 or self.n_bits < 1:
            raise DomainError(f"bit widths must be positive, got M={self.m_bits}, N={self.n_bits}")
        if self.m_bits > 16:
            raise DomainError(f"M={self.m_bits} exceeds the supported maximum of 16")
        if self.m_bits % self.n_bits != 0:
            raise DomainError(f"M={self.m_bits} must be a multiple of N={self.n_bits}")

    @property
    def devices_per_weight(self) -> int:
        return self.m_bits // self.n_bits

    @property
    def levels(self) -> int:
        return 2**self.m_bits


@dataclass(frozen=True)
class VariationSpec:
    """Device model governing weight perturbation.

    max_abs_policy: "model" uses one max|w| over all perturbable weights,
    "per-layer" one per weight tensor.  sampling_path: "per-device" samples
    each device error and composes them; "closed-form" samples one Gaussian
    per weight at the equivalent std.  quantize_first rounds weights to their
    representable values before adding noise (deployment-faithful mode).
    """

    quant: QuantSpec = field(default_factory=QuantSpec)
    sigma_d: float = 0.0
    max_abs_policy: str = "model"
    sampling_path: str = "per-device"
    quantize_first: bool = False

    def __post_init__(self):
        if self.sigma_d < 0:
            raise DomainError(f"sigma_d must be >= 0, got {self.sigma_d}")
        if self.max_abs_policy not in ("model", "per-layer"):
            raise DomainError(f"unknown max_abs_policy {self.max_abs_policy!r}")
        if self.sampling_path not in ("per-device", "closed-form"):
            raise DomainError(f"unknown sampling_path {self.sampling_path!r}")

    @property
    def aging_regime(self) -> bool:
        return self.sigma_d > NORMAL_SIGMA_D_MAX

    def to_dict(self) -> dict:
        return {
            "m_bits": self.quant.m_bits,
            "n_bits": self.quant.n_bits,
            "sigma_d": self.sigma_d,
            "max_abs_policy": self.max_abs_policy,
            "sampling_path": self.sampling_path,
            "quantize_first": self.quantize_first,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VariationSpec":
        return cls(
            quant=QuantSpec(int(d.get("m_bits", 8)), int(d.get("n_bits", 2))),
            sigma_d=float(d.get("sigma_d", 0.0)),
            max_abs_policy=d.get("max_abs_policy", "model"),
            sampling_path=d.get("sampling_path", "per-device"),
            quantize_first=bool(d.get("quantize_first", False)),
        )


def quantize(w, max_abs: float, m_bits: int):
    """Map weights to (code, representable value).

    code = round(|w| * (2^M - 1) / max_abs), an integer in [0, 2^M - 1];
    the representable value is sign(w) * max_abs * code / (2^M - 1).
    Accepts scalars or arrays.
    """
    w = np.asarray(w, dtype=np.float64)
    if max_abs <= 0:
        raise DomainError(f"max_abs must be positive, got {max_abs}")
    if np.any(np.abs(w) > max_abs):
        raise DomainError(f"|w| exceeds max_abs={max_abs}; max found {np.abs(w).max()}")
    full = (1 << m_bits) - 1
    code = np.rint(np.abs(w) * full / max_abs).astype(np.int64)
    ideal = np.sign(w) * max_abs * code / full
    if code.ndim == 0:
        return int(code), float(ideal)
    return code, ideal


def slice_to_devices(code: int, m_bits: int, n_bits: int):
    """Base-2^N digits of the code, least significant device first."""
    spec = QuantSpec(m_bits, n_bits)
    code = int(code)
    if not 0 <= code < spec.levels:
        raise DomainError(f"code {code} outside [0, {spec.levels})")
    base = 1 << n_bits
    digits = []
    for _ in range(spec.devices_per_weight):
        digits.append(code % base)
        code //= base
    return digits


def compose_real_weight(w_ideal: float, device_levels, delta_g, max_abs: float, m_bits: int, n_bits: int) -> float:
    """Stored weight value after device errors land on each conductance.

    The perturbation term carries the weight's sign (magnitudes map to
    conductances; a zero ideal weight perturbs positively).
    """
    spec = QuantSpec(m_bits, n_bits)
    if len(device_levels) != spec.devices_per_weight or len(delta_g) != spec.devices_per_weight:
        raise ContractError(
            f"expected {spec.devices_per_weight} device levels/errors, "
            f"got {len(device_levels)} and {len(delta_g)}"
        )
    sign = -1.0 if w_ideal < 0 else 1.0
    total = sum(float(dg) * (1 << (j * n_bits)) for j, dg in enumerate(delta_g))
    return float(w_ideal + sign * max_abs / ((1 << m_bits) - 1) * total)


def weight_noise_sigma(max_abs: float, m_bits: int, n_bits: int, sigma_d: float) -> float:
    """Std of the weight perturbation when every device error is N(0, sigma_d)."""
    if sigma_d < 0:
        raise DomainError(f"sigma_d must be >= 0, got {sigma_d}")
    spec = QuantSpec(m_bits, n_bits)
    ssq = sum(4.0 ** (j * n_bits) for j in range(spec.devices_per_weight))
    return max_abs / ((1 << m_bits) - 1) * sigma_d * math.sqrt(ssq)


@dataclass
class PerturbationDraw:
    """One sampled weight perturbation: per-tensor delta arrays plus provenance."""

    deltas: dict
    seed: int
    index: tuple

    def apply_to(self, weights: dict) -> dict:
        """New arrays with the perturbation added; inputs are not mutated."""
        return {name: w + self.deltas[name] if name in self.deltas else w.copy() for name, w in weights.items()}


def _sample_delta(shape, sigma_d, max_abs, quant: QuantSpec, path: str, rng, dtype):
    if path == "closed-form":
        sigma_w = weight_noise_sigma(max_abs, quant.m_bits, quant.n_bits, sigma_d)
        return (rng.standard_normal(shape) * sigma_w).astype(dtype, copy=False)
    dg = rng.standard_normal((quant.devices_per_weight,) + tuple(shape))
    scale = max_abs / (quant.levels - 1)
    powers = 2.0 ** (quant.n_bits * np.arange(quant.devices_per_weight, dtype=np.float64))
    delta = np.tensordot(powers, dg, axes=(0, 0)) * (scale * sigma_d)
    return delta.astype(dtype, copy=False)


def perturb_weights(weights: dict, spec: VariationSpec, seed: int, index=()):
    """Sample one perturbation draw for the given weight tensors.

    ``weights`` maps names to arrays (the eligible set: the caller excludes
    biases).  Returns (draw, perturbed) where ``perturbed`` holds new arrays;
    the clean inputs are never mutated.  Draws are reproducible from
    (seed, index) and independent across indices.
    """
    index = tuple(int(i) for i in (index if isinstance(index, (tuple, list)) else (index,)))
    for name, w in weights.items():
        if not np.isfinite(w).all():
            raise ContractError(f"non-finite values in weight tensor {name!r}")

    clean = weights
    if spec.quantize_first:
        clean = {}
        for name, w in weights.items():
            cap = float(np.abs(w).max()) or 1.0
            _, ideal = quantize(w, cap, spec.quant.m_bits)
            clean[name] = ideal.astype(w.dtype, copy=False)

    if spec.sigma_d == 0.0:
        draw = PerturbationDraw({name: np.zeros_like(w) for name, w in clean.items()}, seed, index)
        return draw, {name: w.copy() for name, w in clean.items()}

    if spec.max_abs_policy == "model":
        global_max = max((float(np.abs(w).max()) for w in weights.values()), default=0.0)

    rng = substream(seed, *index)
    deltas = {}
    for name, w in clean.items():
        # max_abs == 0 collapses the representable range, so the noise scale
        # is zero as well.
        max_abs = float(np.abs(weights[name]).max()) if spec.max_abs_policy == "per-layer" else global_max
        deltas[name] = _sample_delta(w.shape, spec.sigma_d, max_abs, spec.quant, spec.sampling_path, rng, w.dtype)
    draw = PerturbationDraw(deltas, seed, index)
    return draw, draw.apply_to(clean)

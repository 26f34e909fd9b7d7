"""Seeded synthetic datasets and their CSV/JSON file formats.

Random draws use the counter-based Philox bit generator. Each matrix gets its
own child of ``SeedSequence(seed)`` (features, noise, teacher ``A``, teacher
``B``), so changing ``n`` never perturbs the teacher.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .equilibrium import ModelParams, forward
from .exceptions import InvalidInputError
from .losses import Dataset

__all__ = [
    "GenSpec",
    "generate",
    "gen_gaussian_negation",
    "gen_uniform_negation",
    "gen_teacher_delm",
    "write_dataset_csv",
    "read_dataset_csv",
    "dataset_to_csv",
    "teacher_to_json",
    "teacher_from_json",
    "FORMAT_VERSION",
]

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
KINDS = ("gaussian_negation", "uniform_negation", "teacher_delm")
_MAX_REDRAWS = 16

@dataclass(frozen=True)
class GenSpec:
    """What to generate. Negation kinds force ``m_y = m``."""

    kind: str = "gaussian_negation"
    n: int = 1000
    m: int = 10
    m_y: int | None = None
    noise_std: float = 0.1
    gamma_teacher: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown dataset kind {self.kind!r}")
        if self.n < 0 or self.m < 1:
            raise InvalidInputError("need n >= 0 and m >= 1")
        if not (self.noise_std >= 0 and math.isfinite(self.noise_std)):
            raise InvalidInputError("noise_std must be finite and nonnegative")
        if not 0.0 < self.gamma_teacher < 1.0:
            raise InvalidInputError("gamma_teacher must lie in (0, 1)")
        if self.seed < 0:
            raise InvalidInputError("seed must be a nonnegative integer")
        if self.kind == "teacher_delm":
            m_y = 1 if self.m_y is None else self.m_y
        else:
            if self.m_y not in (None, self.m):
                raise InvalidInputError(f"{self.kind} forces m_y = m = {self.m}")
            m_y = self.m
        if m_y < 1:
            raise InvalidInputError("m_y must be positive")
        object.__setattr__(self, "m_y", int(m_y))

    def to_dict(self) -> dict:
        return asdict(self)


def _streams(seed: int):
    # Children in order: features, noise, teacher A, teacher B.
    children = np.random.SeedSequence(seed).spawn(4)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def _full_rank_features(spec: GenSpec, rng: np.random.Generator, draw) -> np.ndarray:
    target = min(spec.n, spec.m)
    for attempt in range(_MAX_REDRAWS):
        Phi = draw(rng, (spec.m, spec.n))
        if spec.n == 0 or np.linalg.matrix_rank(Phi) == target:
            return Phi
        logger.warning("rank-deficient features on draw %d; drawing again", attempt)
    raise RuntimeError(f"could not draw full-rank features in {_MAX_REDRAWS} attempts")


def _negation(spec: GenSpec, draw) -> Dataset:
    rng_phi, rng_noise, _, _ = _streams(spec.seed)
    Phi = _full_rank_features(spec, rng_phi, draw)
    noise = rng_noise.standard_normal((spec.m, spec.n))
    return Dataset(Phi, -Phi + spec.noise_std * noise)


def gen_gaussian_negation(spec: GenSpec) -> Dataset:
    """``x_i ~ N(0, I)``, ``y_i = -x_i + noise_std * e_i`` with ``e_i ~ N(0, I)``."""
    if spec.kind != "gaussian_negation":
        raise InvalidInputError(f"spec kind is {spec.kind!r}")
    return _negation(spec, lambda rng, shape: rng.standard_normal(shape))


def gen_uniform_negation(spec: GenSpec) -> Dataset:
    """As :func:`gen_gaussian_negation` with ``x_i`` uniform on ``[-1, 1]^m``."""
    if spec.kind != "uniform_negation":
        raise InvalidInputError(f"spec kind is {spec.kind!r}")
    return _negation(spec, lambda rng, shape: rng.uniform(-1.0, 1.0, shape))


def gen_teacher_delm(spec: GenSpec) -> tuple[Dataset, ModelParams]:
    """Targets ``y_i = B* (I - gamma sigma(A*))^{-1} x_i + noise_std * delta_i``.

    ``A*``, ``B*``, ``x_i`` and ``delta_i`` have i.i.d. standard normal entries.
    """
    if spec.kind != "teacher_delm":
        raise InvalidInputError(f"spec kind is {spec.kind!r}")
    rng_phi, rng_noise, rng_a, rng_b = _streams(spec.seed)
    Phi = _full_rank_features(spec, rng_phi, lambda rng, shape: rng.standard_normal(shape))
    teacher = ModelParams(
        rng_a.standard_normal((spec.m, spec.m)),
        rng_b.standard_normal((spec.m_y, spec.m)),
        spec.gamma_teacher,
    )
    noise = rng_noise.standard_normal((spec.m_y, spec.n))
    Y = forward(teacher, Phi) + spec.noise_std * noise
    return Dataset(Phi, Y), teacher


def generate(spec: GenSpec) -> tuple[Dataset, ModelParams | None]:
    if spec.kind == "teacher_delm":
        return gen_teacher_delm(spec)
    if spec.kind == "gaussian_negation":
        return gen_gaussian_negation(spec), None
    return gen_uniform_negation(spec), None


_HEADER = (
    ("kind", str),
    ("n", int),
    ("m", int),
    ("m_y", int),
    ("noise_std", float),
    ("gamma_teacher", float),
    ("seed", int),
    ("format_version", int),
)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def dataset_to_csv(data: Dataset, spec: GenSpec) -> str:
    """Eight ``# key: type = value`` header lines, then ``n`` rows of ``x_i, y_i``."""
    values = {**spec.to_dict(), "format_version": FORMAT_VERSION}
    values["n"], values["m"], values["m_y"] = data.n, data.m, data.m_y
    lines = [f"# {k}: {t.__name__} = {_fmt(values[k])}" for k, t in _HEADER]
    rows = np.vstack([data.Phi, data.Y]).T
    lines.extend(",".join(repr(float(v)) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def write_dataset_csv(path, data: Dataset, spec: GenSpec) -> None:
    Path(path).write_text(dataset_to_csv(data, spec), encoding="utf-8")


def read_dataset_csv(path) -> tuple[Dataset, GenSpec]:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if len(text) < len(_HEADER):
        raise InvalidInputError(f"{path}: truncated header")
    meta = {}
    for line, (key, typ) in zip(text, _HEADER):
        prefix = f"# {key}: {typ.__name__} = "
        if not line.startswith(prefix):
            raise InvalidInputError(f"{path}: expected header line for {key!r}, got {line!r}")
        meta[key] = typ(line[len(prefix):])
    if meta.pop("format_version") != FORMAT_VERSION:
        raise InvalidInputError(f"{path}: unsupported format version")
    n, m, m_y = meta["n"], meta["m"], meta["m_y"]
    body = text[len(_HEADER):]
    if len(body) != n:
        raise InvalidInputError(f"{path}: header says n = {n}, found {len(body)} rows")
    rows = np.array([[float(v) for v in line.split(",")] for line in body]).reshape(n, m + m_y)
    data = Dataset(rows[:, :m].T, rows[:, m:].T)
    return data, GenSpec(**meta)


def teacher_to_json(teacher: ModelParams) -> str:
    return json.dumps(
        {"A": teacher.A.tolist(), "B": teacher.B.tolist(), "gamma": teacher.gamma},
        indent=2,
    )


def teacher_from_json(text: str) -> ModelParams:
    d = json.loads(text)
    return ModelParams(np.array(d["A"]), np.array(d["B"]), d["gamma"])

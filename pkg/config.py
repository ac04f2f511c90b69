import os
from dataclasses import asdict, dataclass, fields

from dotenv import dotenv_values, load_dotenv

from core.errors import ValidationError
from core.objective import LsmHyper, MtlHyper, Regularizer
from core.optim import SAMPLING_MODES, SgdConfig
from core.patchsel import SELECTION_STRATEGIES
from experiments.protocols import INIT_METHODS, K_SELECTION_MODES, GridSpec, ProtocolConfig
from services.dataset_io import SplitSpec, SynthConfig

# Load environment variables from the .env file in the project root; every variable has a default
dotenv_path = os.path.join(os.path.dirname(__file__), '.env')
load_dotenv(dotenv_path=dotenv_path)


def _env_int(name: str, raw: str | None, default: int) -> int:
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"{name} must be an integer, got '{raw}'") from None


# Integer variables are kept raw and parsed by build_run_config
LSM_SEED = os.getenv("LSM_SEED")
LSM_OUTPUT_DIR = os.getenv("LSM_OUTPUT_DIR", "results")
LSM_LOG_LEVEL = os.getenv("LSM_LOG_LEVEL", "INFO").upper()
LSM_LOG_FILE = os.getenv("LSM_LOG_FILE") or None
LSM_N_JOBS = os.getenv("LSM_N_JOBS")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_axis(text: str, cast=float) -> tuple:
    """Either a comma list `a,b,c` or an inclusive range `start:stop[:step]`."""
    text = str(text).strip()
    try:
        if ":" in text:
            parts = [float(p) for p in text.split(":")]
            if len(parts) not in (2, 3):
                raise ValueError
            start, stop = parts[0], parts[1]
            step = parts[2] if len(parts) == 3 else 1.0
            if step <= 0:
                raise ValueError
            n = int(round((stop - start) / step)) + 1
            values = [start + i * step for i in range(max(n, 0))]
        else:
            values = [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ValidationError(f"malformed grid axis '{text}'")
    if not values:
        raise ValidationError(f"grid axis '{text}' is empty")
    return tuple(cast(v) for v in values)


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved parameters of one CLI run: defaults < environment < config file < flags."""
    subcommand: str
    seed: int = 0
    out: str = "results"
    n_jobs: int = 1
    data: str = ""
    # model and training
    k: int = 2
    c1: float = 1.0
    c2: float = 1.0
    rho: float = 1.0
    lam: float = 1.0
    reg: str = "sum_sq"
    neg_variant: bool = False
    epochs: int = 100
    eta0: float = 1.0
    tol: float = 1e-6
    cooldown: int = 5
    cooldown_enabled: bool = True
    sampling: str = "pooled"
    max_outer: int = 20
    init: str = "kmeans"
    init_scale: float = 0.01
    restarts: int = 10
    split: float = 0.75
    # synthetic data
    n_datasets: int = 3
    n_subcategories: int = 2
    dim: int = 2
    pos_per_cluster: int = 50
    neg_per_dataset: int = 100
    separation: float = 4.0
    bias_shift: float = 0.0
    noise: float = 1.0
    background_scale: float = 1.0
    # protocols
    heldout: int = 0
    runs: int = 30
    n_samples: int = 1000
    k_values: str = "1:10"
    rho_exponents: str = "-9:4"
    c_exponents: str = "-9:4:0.5"
    k_selection: str = "validation"
    # patch selection
    patches: str = ""
    pos_records: str = ""
    neg_records: str = ""
    n_select: int = 10
    strategy: str = "combined"
    use_spatial: bool = True

    def __post_init__(self):
        positive_ints = ("k", "epochs", "max_outer", "restarts", "n_datasets", "n_subcategories", "dim",
                         "pos_per_cluster", "neg_per_dataset", "runs", "n_select")
        for name in positive_ints:
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("c1", "c2", "rho", "lam", "tol", "init_scale", "noise", "background_scale", "separation",
                     "bias_shift", "cooldown", "n_samples", "seed", "heldout"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.eta0 <= 0:
            raise ValidationError(f"eta0 must be positive, got {self.eta0}")
        if not 0.0 < self.split < 1.0:
            raise ValidationError(f"split must lie in (0, 1), got {self.split}")
        if self.n_jobs == 0:
            raise ValidationError("n_jobs must be nonzero")
        choices = {"reg": [r.value for r in Regularizer], "sampling": SAMPLING_MODES, "init": INIT_METHODS,
                   "k_selection": K_SELECTION_MODES, "strategy": SELECTION_STRATEGIES}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ValidationError(f"{name} must be one of {tuple(allowed)}, got '{getattr(self, name)}'")
        # grid axes fail here rather than mid-run
        self.grid_spec()

    def as_dict(self) -> dict:
        return asdict(self)

    def sgd_config(self) -> SgdConfig:
        return SgdConfig(epochs=self.epochs, eta0=self.eta0, seed=self.seed, tol_weight_change=self.tol,
                         cooldown_len=self.cooldown, cooldown_enabled=self.cooldown_enabled, sampling=self.sampling)

    def protocol_config(self) -> ProtocolConfig:
        return ProtocolConfig(sgd=self.sgd_config(), init=self.init, init_scale=self.init_scale,
                              kmeans_restarts=self.restarts, n_jobs=self.n_jobs)

    def mtl_hyper(self) -> MtlHyper:
        return MtlHyper(K=self.k, C1=self.c1, C2=self.c2, rho=self.rho)

    def lsm_hyper(self) -> LsmHyper:
        return LsmHyper(K=self.k, lam=self.lam, reg=Regularizer(self.reg), neg_variant=self.neg_variant)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(train_fraction=self.split, seed=self.seed)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(n_datasets=self.n_datasets, n_subcategories=self.n_subcategories, dim=self.dim,
                           pos_per_cluster=self.pos_per_cluster, neg_per_dataset=self.neg_per_dataset,
                           separation=self.separation, bias_shift=self.bias_shift, noise=self.noise,
                           background_scale=self.background_scale, seed=self.seed)

    def grid_spec(self) -> GridSpec:
        c = parse_axis(self.c_exponents)
        return GridSpec(rho_exponents=parse_axis(self.rho_exponents), c1_exponents=c, c2_exponents=c,
                        k_values=parse_axis(self.k_values, int))


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value):
    kind = _FIELDS[name].type
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ValidationError(f"config key '{name}' has invalid value '{value}'")
    return text


def load_config_file(path) -> dict:
    """Flat `key=value` file; keys are the long flag names with '-' replaced by '_'."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"config file not found: {path}")
    values = {}
    for key, value in dotenv_values(path).items():
        name = key.strip().replace("-", "_")
        if name not in _FIELDS or name == "subcommand":
            raise ValidationError(f"unknown config key '{key}' in {path}")
        if value is None:
            raise ValidationError(f"config key '{key}' in {path} has no value")
        values[name] = _coerce(name, value)
    return values


def build_run_config(subcommand: str, flags: dict, config_file: str | None = None) -> RunConfig:
    """Merges environment defaults, an optional config file and the flags that were actually given."""
    values = {"seed": _env_int("LSM_SEED", LSM_SEED, 0), "out": LSM_OUTPUT_DIR,
              "n_jobs": _env_int("LSM_N_JOBS", LSM_N_JOBS, 1)}
    if config_file:
        values.update(load_config_file(config_file))
    for name, value in flags.items():
        if value is not None and name in _FIELDS and name != "subcommand":
            values[name] = _coerce(name, value)
    return RunConfig(subcommand=subcommand, **values)

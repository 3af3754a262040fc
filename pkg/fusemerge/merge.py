
import re
import json
import math
import logging
from multiprocessing.pool import ThreadPool

import numpy as np
from scipy import special

import fusemerge.utils.utils as utils
import fusemerge.utils.prng as prng
from fusemerge.tensor_store import Checkpoint, validate_compatible, partition_units
from fusemerge.exceptions import IncompatibleCheckpointsError, UnitMismatchError, MissingUnitWeightError, \
                                 CoefficientError, ConfigError
from fusemerge import constants

METHOD_ALIASES = {
    "ta": "task_arithmetic",
}

class MergeConfig:

    FIELDS = {
        "method": "varm",
        "granularity": constants.DEFAULT_GRANULARITY,
        "weight_mode": constants.DEFAULT_WEIGHT_MODE,
        "coeffs": None,
        "t": constants.DEFAULT_SLERP_T,
        "scale": constants.DEFAULT_SCALE,
        "density": constants.DEFAULT_DENSITY,
        "drop_rate": constants.DEFAULT_DROP_RATE,
        "seed": constants.DEFAULT_SEED,
        "temperature": constants.DEFAULT_SOFTMAX_TEMPERATURE,
        "layer_pattern": constants.DEFAULT_LAYER_PATTERN,
        "name_filter": None,
    }

    def __init__(self, **kwargs):
        unknown = set(kwargs) - set(self.FIELDS)

        if unknown:
            raise ConfigError(f"unknown merge config keys: {sorted(unknown)}")

        for field, default in self.FIELDS.items():
            setattr(self, field, kwargs.get(field, default))

        self.method = METHOD_ALIASES.get(self.method, self.method)

        self.validate()

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def validate(self):
        if self.method not in constants.MERGE_METHODS:
            raise ConfigError(f"unknown method '{self.method}' (expected one of {', '.join(constants.MERGE_METHODS)})")
        if self.granularity not in constants.GRANULARITIES:
            raise ConfigError(f"unknown granularity '{self.granularity}'")
        if self.weight_mode not in constants.WEIGHT_MODES:
            raise ConfigError(f"unknown weight mode '{self.weight_mode}'")
        if not 0.0 <= self.t <= 1.0:
            raise ConfigError(f"t must be in [0, 1]: {self.t}")
        if not 0.0 < self.density <= 1.0:
            raise ConfigError(f"density must be in (0, 1]: {self.density}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError(f"drop_rate must be in [0, 1): {self.drop_rate}")
        if not self.temperature > 0.0:
            raise ConfigError(f"temperature must be positive: {self.temperature}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer: {self.seed}")

    def to_dict(self):
        return {field: getattr(self, field) for field in self.FIELDS}

    def effective(self):
        """Only the fields the selected method reads
        """
        relevant = {
            "varm": ("granularity", "weight_mode", "temperature", "layer_pattern"),
            "linear": ("coeffs",),
            "slerp": ("t",),
            "task_arithmetic": ("scale",),
            "ties": ("density", "scale"),
            "dare": ("drop_rate", "scale", "seed"),
        }[self.method]
        result = {"method": self.method, "name_filter": self.name_filter}

        result.update({field: getattr(self, field) for field in relevant})

        return result

class DeltaStats:
    """Per-unit mean squared / mean absolute parameter change of one target against the base
    """

    def __init__(self, unit_ids, mean_sq, mean_abs, count):
        self.unit_ids = list(unit_ids)
        self.mean_sq = np.asarray(mean_sq, dtype=np.float64)
        self.mean_abs = np.asarray(mean_abs, dtype=np.float64)
        self.count = np.asarray(count, dtype=np.int64)

    def as_dict(self):
        return {unit_id: {"mean_sq": float(self.mean_sq[idx]), "mean_abs": float(self.mean_abs[idx]),
                          "count": int(self.count[idx])}
                for idx, unit_id in enumerate(self.unit_ids)}

class MergeWeights:
    """values[u, j] is the weight of target j in unit unit_ids[u]
    """

    def __init__(self, unit_ids, values):
        self.unit_ids = list(unit_ids)
        self.values = np.asarray(values, dtype=np.float64)
        self.unit_index = {unit_id: idx for idx, unit_id in enumerate(self.unit_ids)}

        if self.values.ndim != 2 or self.values.shape[0] != len(self.unit_ids):
            raise ValueError(f"unexpected shape of merge weights: {self.values.shape} for {len(self.unit_ids)} units")

    def notargets(self):
        return self.values.shape[1]

    def to_report(self):
        return [{"unit": unit_id, "weights": [float(w) for w in self.values[idx]]}
                for idx, unit_id in enumerate(self.unit_ids)]

def _map_tensors(func, names):
    nothreads = 1 if len(names) <= 1 else utils.get_nothreads()

    if nothreads <= 1:
        return [func(name) for name in names]

    # map() keeps the input order, so results do not depend on scheduling
    with ThreadPool(processes=min(nothreads, len(names))) as pool:
        return pool.map(func, names)

def _check_compatible(ckpts, label="checkpoints"):
    report = validate_compatible(ckpts)

    if not report.compatible:
        details = ", ".join(f"{name} ({kind})" for name, kind in report.mismatches[:10])

        raise IncompatibleCheckpointsError(f"{label}: {details}")

    return report

def _as_f64(tensor):
    return np.asarray(tensor, dtype=np.float64)

def _build(reference, values, metadata):
    """Merged tensors keep the dtype of the reference checkpoint
    """
    tensors = {name: value.astype(reference[name].dtype) for name, value in values.items()}
    merged_metadata = {k: v for k, v in reference.metadata.items() if k in constants.INHERITED_METADATA_KEYS}

    merged_metadata.update(metadata if metadata is not None else {})

    return Checkpoint(tensors, merged_metadata)

def _metadata(method, config):
    return {"merge_method": method,
            "merge_config": json.dumps(config, sort_keys=True)}

def delta_stats(base, target, partition):
    _check_compatible([base, target], label="base and target")

    nounits = len(partition)
    mean_sq = np.zeros(nounits, dtype=np.float64)
    mean_abs = np.zeros(nounits, dtype=np.float64)
    count = np.zeros(nounits, dtype=np.int64)
    groups = [[] for _ in range(nounits)]

    for name, tensor in base:
        if name not in partition.tensor_sizes:
            raise UnitMismatchError(f"tensor '{name}' is not covered by the partition")

        delta = (_as_f64(target[name]) - _as_f64(tensor)).reshape(-1)
        positions = partition.positions(name)

        if partition.granularity == "parameter":
            mean_sq[positions] = delta * delta
            mean_abs[positions] = np.abs(delta)
            count[positions] = 1
        else:
            groups[positions].append(delta)

    if partition.granularity != "parameter":
        for idx, group in enumerate(groups):
            if len(group) == 0:
                continue

            values = np.concatenate(group)
            count[idx] = values.size

            if values.size == 0:
                continue

            # fsum is exactly rounded, so the statistic does not depend on summation order
            mean_sq[idx] = math.fsum(values * values) / values.size
            mean_abs[idx] = math.fsum(np.abs(values)) / values.size

    return DeltaStats(partition.unit_ids, mean_sq, mean_abs, count)

def varm_weights(stats, mode=constants.DEFAULT_WEIGHT_MODE, temperature=constants.DEFAULT_SOFTMAX_TEMPERATURE):
    if len(stats) == 0:
        raise ValueError("at least one target is needed to compute merge weights")
    if mode not in constants.WEIGHT_MODES:
        raise ValueError(f"unknown weight mode: '{mode}'")

    unit_ids = stats[0].unit_ids

    for idx, s in enumerate(stats[1:], 1):
        if s.unit_ids != unit_ids:
            raise UnitMismatchError(f"the statistics of target #{idx} are over different units")

    notargets = len(stats)

    if len(unit_ids) == 0:
        return MergeWeights(unit_ids, np.zeros((0, notargets)))

    if mode == "softmax":
        scores = np.stack([s.mean_sq for s in stats], axis=1)

        return MergeWeights(unit_ids, special.softmax(scores / temperature, axis=1))

    numerators = np.stack([s.mean_sq if mode == "square" else s.mean_abs for s in stats], axis=1)
    denominator = numerators[:, 0].copy()

    for j in range(1, notargets):
        denominator += numerators[:, j]

    unchanged = denominator == 0.0
    weights = np.empty_like(numerators)

    weights[~unchanged] = numerators[~unchanged] / denominator[~unchanged, None]
    # No target moved in these units: every target weighs the same
    weights[unchanged] = 1.0 / notargets

    if np.any(unchanged):
        logging.debug(f"{int(np.sum(unchanged))} units without variation: uniform weights")

    return MergeWeights(unit_ids, weights)

def merge_weighted(targets, weights, partition, metadata=None):
    if len(targets) == 0:
        raise ValueError("at least one target is needed")

    _check_compatible(targets, label="targets")

    if weights.notargets() != len(targets):
        raise UnitMismatchError(f"weights are given for {weights.notargets()} targets, but {len(targets)} targets were provided")

    for unit_id in partition.unit_ids:
        if unit_id not in weights.unit_index:
            raise MissingUnitWeightError(unit_id)

    for name in targets[0].names():
        if name not in partition.tensor_sizes:
            raise UnitMismatchError(f"tensor '{name}' is not covered by the partition")

    # Partition positions -> rows of the weight matrix
    rows = np.array([weights.unit_index[unit_id] for unit_id in partition.unit_ids], dtype=np.int64)
    reference = targets[0]

    def merge_tensor(name):
        tensor = reference[name]
        positions = partition.positions(name)
        w = weights.values[rows[positions]]

        if partition.granularity == "parameter":
            w = w.reshape(tensor.shape + (len(targets),))
            result = w[..., 0] * _as_f64(targets[0][name])

            for j in range(1, len(targets)):
                result = result + w[..., j] * _as_f64(targets[j][name])
        else:
            result = w[0] * _as_f64(targets[0][name])

            for j in range(1, len(targets)):
                result = result + w[j] * _as_f64(targets[j][name])

        return result

    names = reference.names()
    values = dict(zip(names, _map_tensors(merge_tensor, names)))

    return _build(reference, values, metadata)

def merge_varm(base, targets, granularity=constants.DEFAULT_GRANULARITY, mode=constants.DEFAULT_WEIGHT_MODE,
               layer_pattern=constants.DEFAULT_LAYER_PATTERN, temperature=constants.DEFAULT_SOFTMAX_TEMPERATURE,
               return_weights=False):
    if len(targets) == 0:
        raise ValueError("at least one target is needed")

    _check_compatible([base] + list(targets), label="base and targets")

    partition = partition_units(base, granularity, layer_pattern=layer_pattern)
    stats = [delta_stats(base, target, partition) for target in targets]
    weights = varm_weights(stats, mode=mode, temperature=temperature)
    config = {"granularity": granularity, "weight_mode": mode, "temperature": temperature,
              "layer_pattern": layer_pattern, "notargets": len(targets)}

    logging.info(f"VaRM: {len(targets)} targets, {len(partition)} units ({granularity} granularity, {mode} mode)")

    merged = merge_weighted(targets, weights, partition, metadata=_metadata("varm", config))

    if return_weights:
        return merged, weights

    return merged

def merge_linear(targets, coeffs):
    if len(targets) == 0:
        raise ValueError("at least one target is needed")
    if coeffs is None or len(coeffs) != len(targets):
        raise CoefficientError(f"{0 if coeffs is None else len(coeffs)} coefficients for {len(targets)} targets")
    if abs(math.fsum(coeffs) - 1.0) > constants.LINEAR_COEFFS_TOLERANCE:
        raise CoefficientError(f"coefficients must sum to 1 (sum is {math.fsum(coeffs)})")

    _check_compatible(targets, label="targets")

    coeffs = [float(c) for c in coeffs]
    reference = targets[0]

    def merge_tensor(name):
        result = coeffs[0] * _as_f64(targets[0][name])

        for j in range(1, len(targets)):
            result = result + coeffs[j] * _as_f64(targets[j][name])

        return result

    names = reference.names()
    values = dict(zip(names, _map_tensors(merge_tensor, names)))

    return _build(reference, values, _metadata("linear", {"coeffs": coeffs}))

def slerp_vectors(u, v, t):
    """Spherical interpolation of two flat float64 vectors; degenerate angles fall back to linear interpolation
    """
    if t == 0.0:
        return u.copy()
    if t == 1.0:
        return v.copy()

    norm_u = np.linalg.norm(u)
    norm_v = np.linalg.norm(v)

    if norm_u == 0.0 or norm_v == 0.0:
        return u + t * (v - u)

    cos_omega = np.clip(np.dot(u, v) / (norm_u * norm_v), -1.0, 1.0)
    omega = np.arccos(cos_omega)
    sin_omega = np.sin(omega)

    if sin_omega < constants.SLERP_EPSILON:
        # Parallel or antiparallel: no unique geodesic
        return u + t * (v - u)

    return np.sin((1.0 - t) * omega) / sin_omega * u + np.sin(t * omega) / sin_omega * v

def merge_slerp(a, b, t=constants.DEFAULT_SLERP_T):
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1]: {t}")

    _check_compatible([a, b], label="slerp inputs")

    def merge_tensor(name):
        u = _as_f64(a[name]).reshape(-1)
        v = _as_f64(b[name]).reshape(-1)

        return slerp_vectors(u, v, t).reshape(a[name].shape)

    names = a.names()
    values = dict(zip(names, _map_tensors(merge_tensor, names)))

    return _build(a, values, _metadata("slerp", {"t": t}))

def _task_vectors(base, targets, name):
    b = _as_f64(base[name])

    return b, [_as_f64(target[name]) - b for target in targets]

def _add_scaled(b, taus, scale):
    total = taus[0]

    for tau in taus[1:]:
        total = total + tau

    return b + scale * total

def merge_task_arithmetic(base, targets, scale=constants.DEFAULT_SCALE):
    if len(targets) == 0:
        raise ValueError("at least one target is needed")

    _check_compatible([base] + list(targets), label="base and targets")

    def merge_tensor(name):
        b, taus = _task_vectors(base, targets, name)

        return _add_scaled(b, taus, scale)

    names = base.names()
    values = dict(zip(names, _map_tensors(merge_tensor, names)))

    return _build(base, values, _metadata("task_arithmetic", {"scale": scale}))

def trim_top_k(tau, density):
    """Keep the ceil(density * n) largest magnitudes of a tensor, zero the rest (ties: lower flat index first)
    """
    flat = tau.reshape(-1)
    n = flat.size

    if n == 0:
        return tau.copy()

    k = min(n, max(1, int(math.ceil(density * n - 1e-9))))
    keep = np.argsort(-np.abs(flat), kind="stable")[:k]
    trimmed = np.zeros_like(flat)
    trimmed[keep] = flat[keep]

    return trimmed.reshape(tau.shape)

def ties_merge_task_vectors(taus, density):
    trimmed = [trim_top_k(tau, density) for tau in taus]
    total = trimmed[0]

    for tau in trimmed[1:]:
        total = total + tau

    # Elect: sign of the summed trimmed task vectors, zero sums count as positive
    elected = np.where(total >= 0.0, 1.0, -1.0)
    selected_sum = np.zeros_like(total)
    selected_count = np.zeros(total.shape, dtype=np.int64)

    for tau in trimmed:
        agrees = np.sign(tau) == elected
        selected_sum = selected_sum + np.where(agrees, tau, 0.0)
        selected_count += agrees

    merged = np.zeros_like(total)
    nonempty = selected_count > 0
    merged[nonempty] = selected_sum[nonempty] / selected_count[nonempty]

    return merged

def merge_ties(base, targets, density=constants.DEFAULT_DENSITY, scale=constants.DEFAULT_SCALE):
    if len(targets) == 0:
        raise ValueError("at least one target is needed")
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must be in (0, 1]: {density}")

    _check_compatible([base] + list(targets), label="base and targets")

    def merge_tensor(name):
        b, taus = _task_vectors(base, targets, name)

        return b + scale * ties_merge_task_vectors(taus, density)

    names = base.names()
    values = dict(zip(names, _map_tensors(merge_tensor, names)))

    return _build(base, values, _metadata("ties", {"density": density, "scale": scale}))

def dare_task_vector(tau, drop_rate, seed, target_idx, name):
    draws = prng.uniform_array(seed, target_idx, name, tau.size).reshape(tau.shape)
    keep = draws >= drop_rate

    return np.where(keep, tau / (1.0 - drop_rate), 0.0)

def merge_dare(base, targets, drop_rate=constants.DEFAULT_DROP_RATE, scale=constants.DEFAULT_SCALE,
               seed=constants.DEFAULT_SEED):
    if len(targets) == 0:
        raise ValueError("at least one target is needed")
    if not 0.0 <= drop_rate < 1.0:
        raise ValueError(f"drop_rate must be in [0, 1): {drop_rate}")

    _check_compatible([base] + list(targets), label="base and targets")

    def merge_tensor(name):
        b, taus = _task_vectors(base, targets, name)
        taus = [dare_task_vector(tau, drop_rate, seed, j, name) for j, tau in enumerate(taus)]

        return _add_scaled(b, taus, scale)

    names = base.names()
    values = dict(zip(names, _map_tensors(merge_tensor, names)))

    return _build(base, values, _metadata("dare", {"drop_rate": drop_rate, "scale": scale, "seed": seed}))

def _select(ckpt, names):
    return Checkpoint({name: ckpt[name] for name in names}, ckpt.metadata)

def merge(config, base, targets):
    """Run the configured method and return (merged checkpoint, JSON-ready report)
    """
    if len(targets) == 0:
        raise ValueError("at least one target is needed")
    if config.method in ("varm", "task_arithmetic", "ties", "dare") and base is None:
        raise ValueError(f"method '{config.method}' needs a base checkpoint")
    if config.method == "slerp" and len(targets) != 2:
        raise ValueError(f"slerp needs exactly two targets ({len(targets)} provided)")

    reference = base if base is not None else targets[0]
    excluded = []

    if config.name_filter:
        regex = re.compile(config.name_filter)
        included = [name for name in reference.names() if regex.search(name)]
        excluded = [name for name in reference.names() if not regex.search(name)]

        logging.info(f"Name filter '{config.name_filter}': {len(included)} tensors merged, {len(excluded)} copied unchanged")

        if base is not None:
            base = _select(base, included)

        targets = [_select(target, included) for target in targets]

    report = {"method": config.method, "notargets": len(targets), "excluded": excluded}

    logging.info(f"Merging method: {config.method}")

    if config.method == "varm":
        merged, weights = merge_varm(base, targets, granularity=config.granularity, mode=config.weight_mode,
                                     layer_pattern=config.layer_pattern, temperature=config.temperature,
                                     return_weights=True)
        report["granularity"] = config.granularity
        report["weight_mode"] = config.weight_mode
        report["units"] = weights.to_report()
    else:
        if config.method == "linear":
            coeffs = config.coeffs if config.coeffs is not None else [1.0 / len(targets)] * len(targets)
            merged = merge_linear(targets, coeffs)
        elif config.method == "slerp":
            merged = merge_slerp(targets[0], targets[1], t=config.t)
        elif config.method == "task_arithmetic":
            merged = merge_task_arithmetic(base, targets, scale=config.scale)
        elif config.method == "ties":
            merged = merge_ties(base, targets, density=config.density, scale=config.scale)
        else:
            merged = merge_dare(base, targets, drop_rate=config.drop_rate, scale=config.scale, seed=config.seed)

        report["config"] = config.effective()

    if excluded:
        tensors = dict(merged.tensors)

        for name in excluded:
            tensors[name] = reference[name]

        merged = Checkpoint(tensors, merged.metadata)

    return merged, report

"""Fréchet distance and inception-style score over a pinned evaluation network.

The evaluation network is a prototype classifier (feature extractor plus
codebook) trained on a split disjoint from the generator's training data.
Its extractor output is the feature space for the Fréchet distance and its
distance softmax gives the class posteriors for the score. Numbers are only
comparable between reports that share ``feature_extractor_id``.
"""

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import container
from .protolearn import Codebook, FeatureExtractor, class_probabilities


class EvalError(ValueError):
    pass


@dataclass
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    n: int


def gaussian_stats(features):
    """Sample mean and unbiased covariance of the rows of ``features``."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise EvalError(f"features must be 2-D, got shape {x.shape}")
    if x.shape[0] < 2:
        raise EvalError(f"need at least 2 rows for a covariance, got {x.shape[0]}")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (x.shape[0] - 1)
    return FeatureStats(mu, (cov + cov.T) / 2.0, x.shape[0])


def _sqrt_psd(m):
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a, b):
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``, floored at 0.

    The trace of ``(S_a S_b)^(1/2)`` is taken as the trace of the symmetric
    root of ``S_a^(1/2) S_b S_a^(1/2)``, which has the same eigenvalues.
    """
    if a.mean.shape != b.mean.shape:
        raise EvalError(f"feature dimension mismatch {a.mean.shape} vs {b.mean.shape}")
    sa = (a.covariance + a.covariance.T) / 2.0
    sb = (b.covariance + b.covariance.T) / 2.0
    try:
        ra = _sqrt_psd(sa)
        inner = ra @ sb @ ra
        vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    except np.linalg.LinAlgError as exc:
        raise EvalError(f"eigen-decomposition did not converge: {exc}") from exc
    tr_cross = float(np.sum(np.sqrt(np.clip(vals, 0.0, None))))
    diff = a.mean - b.mean
    d = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * tr_cross)
    return max(d, 0.0)


def inception_score(class_probs, tol=1e-6):
    """``exp(mean_n KL(p(y|x_n) || mean_m p(y|x_m)))`` with ``0 log 0 = 0``."""
    p = np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise EvalError(f"class_probs must be a non-empty N x C matrix, got shape {p.shape}")
    if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max() > tol:
        raise EvalError("every row of class_probs must be a probability vector")
    marg = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marg)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


@dataclass(eq=False)
class EvalNetwork:
    extractor: FeatureExtractor
    codebook: Codebook
    gamma: float = 1.0

    @property
    def id(self):
        h = hashlib.sha256()
        h.update(container.canonical_json({"spec": self.extractor.spec(), "gamma": self.gamma}).encode())
        for k in sorted(self.extractor.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.extractor.params[k]).tobytes())
        h.update(np.ascontiguousarray(self.codebook.prototypes).tobytes())
        return h.hexdigest()[:16]

    def features(self, images):
        return self.extractor(images).astype(np.float64)

    def posteriors(self, feats):
        return class_probabilities(feats, self.codebook, self.gamma)


def save_network(path, extractor, codebook, header=None):
    meta = {"kind": "proto", "extractor": extractor.spec()}
    meta.update(header or {})
    tensors = {f"extractor.{k}": v for k, v in extractor.params.items()}
    tensors["codebook.prototypes"] = codebook.prototypes
    container.save(path, meta, tensors)


def load_network(path):
    header, t = container.load(path)
    if header.get("kind") != "proto":
        raise EvalError(f"{path}: not a prototype artifact (kind={header.get('kind')!r})")
    s = header["extractor"]
    ext = FeatureExtractor(s["arch"], s["in_channels"], s["dim"], s["width"], container.group(t, "extractor"))
    return ext, Codebook(t["codebook.prototypes"]), header


@dataclass
class EvalReport:
    fid: float
    is_score: float
    n_samples: int
    n_reference: int
    feature_extractor_id: str
    seed: int

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def evaluate(generated, reference, network, seed=0, reference_stats=None):
    generated = np.asarray(generated, dtype=np.float32)
    reference = np.asarray(reference, dtype=np.float32)
    if generated.shape[0] == 0 or reference.shape[0] == 0:
        raise EvalError("both generated and reference batches must be non-empty")
    if generated.shape[1:] != reference.shape[1:]:
        raise EvalError(f"image shape mismatch {generated.shape[1:]} vs {reference.shape[1:]}")
    fg = network.features(generated)
    ref = reference_stats if reference_stats is not None else gaussian_stats(network.features(reference))
    fid = frechet_distance(gaussian_stats(fg), ref)
    score = inception_score(network.posteriors(fg))
    return EvalReport(fid, score, int(generated.shape[0]), int(reference.shape[0]), network.id, int(seed))


REPORT_FIELDS = [f.name for f in fields(EvalReport)]


def reports_to_csv(reports):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS)
    w.writeheader()
    for r in reports:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(r).items()})
    return buf.getvalue()


def reports_from_csv(text):
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append(EvalReport(float(row["fid"]), float(row["is_score"]), int(row["n_samples"]),
                              int(row["n_reference"]), row["feature_extractor_id"], int(row["seed"])))
    return out

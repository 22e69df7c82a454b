"""End-to-end orchestration shared by the command line and the test suite.

Extraction runs the offline stages per shape (spectrum or sampled cloud,
raw descriptors, pooling, eigendecomposition of the pooled matrix) behind
the content-addressed cache. Feature assembly turns cached records into
the trainer's feature sets for each ablation mode, and the evaluation
helpers produce embeddings, ranked lists, and reports.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import descriptors, evaluation, lb_operator, metric, pooling, spdm, \
    trainer
from .errors import DataError, SpecpoolError
from .rng import substream
from .shape_io import (PointCloud, bounding_sphere_diameter, load_mesh,
                       mesh_content_hash, sample_points)

logger = logging.getLogger(__name__)

SPECTRAL_DESCRIPTORS = ("sihks_wks", "sihks", "wks", "hks")

ABLATIONS = ("surf_o1", "surf_o2", "surf_o1_ml", "surf_o2_ml", "st_net")

TRAINED_ABLATIONS = ("surf_o1_ml", "surf_o2_ml", "st_net")

_HKS_DEFAULT_TIMES = 16


@dataclass
class ShapeRecord:
    """Arrays the downstream stages need for one shape."""

    shape_id: str
    label: int
    o1: np.ndarray        # pooled first-order vector
    H: np.ndarray         # pooled second-order matrix
    U: np.ndarray         # eigenvectors of H
    lam: np.ndarray       # normalized eigenvalues of H


def _descriptor_params(run):
    # the seed only matters where randomness enters (sampling, LSF caps)
    params = {"descriptor": run.descriptor}
    if run.descriptor == "lsf":
        params.update(n_points=run.n_points, seed=run.seed,
                      lsf_radius_frac=run.lsf_radius_frac,
                      neighbor_cap=run.neighbor_cap)
    else:
        params.update(k_eig=run.k_eig)
    return params


def _spectral_field(spectrum, run):
    if run.descriptor == "sihks_wks":
        return descriptors.concat([descriptors.sihks(spectrum),
                                   descriptors.wks(spectrum)])
    if run.descriptor == "sihks":
        return descriptors.sihks(spectrum)
    if run.descriptor == "wks":
        return descriptors.wks(spectrum)
    lam_top = spectrum.eigenvalues[-1]
    lam_low = max(spectrum.eigenvalues[1], lam_top * 1e-6)
    times = np.geomspace(4.0 / lam_top, 4.0 / lam_low, _HKS_DEFAULT_TIMES)
    return descriptors.hks(spectrum, times)


def extract_shape(entry, manifest, run, cache):
    """Offline stages for one shape, each behind the cache."""
    mesh = load_mesh(manifest.full_path(entry))
    chash = mesh_content_hash(mesh)
    dparams = _descriptor_params(run)

    if run.descriptor in SPECTRAL_DESCRIPTORS:
        def compute_spectrum():
            spec = lb_operator.mesh_spectrum(mesh, run.k_eig)
            return {"eigenvalues": spec.eigenvalues,
                    "eigenfunctions": spec.eigenfunctions,
                    "mass": spec.mass}

        spec_rec = _cached(cache, entry.shape_id, "spectrum", chash,
                           {"k_eig": run.k_eig}, compute_spectrum)
        spectrum = lb_operator.LBSpectrum(spec_rec["eigenvalues"],
                                          spec_rec["eigenfunctions"],
                                          spec_rec["mass"])

        def compute_descriptor():
            return {"values": _spectral_field(spectrum, run).values}

        weights = pooling.mesh_weights(spectrum.mass)
    else:
        def compute_cloud():
            cloud = sample_points(mesh, run.n_points,
                                  substream(run.seed, "sample",
                                            entry.shape_id))
            return {"points": cloud.points, "normals": cloud.normals}

        cloud_rec = _cached(cache, entry.shape_id, "cloud", chash,
                            {"n_points": run.n_points, "seed": run.seed},
                            compute_cloud)
        cloud = PointCloud(cloud_rec["points"], cloud_rec["normals"])

        def compute_descriptor():
            radius = run.lsf_radius_frac \
                * bounding_sphere_diameter(cloud.points)
            params = descriptors.LSFParams(radius=radius,
                                           neighbor_cap=run.neighbor_cap)
            return {"values": descriptors.lsf(cloud, params,
                                              seed=run.seed).values}

        weights = pooling.cloud_weights(run.n_points)

    desc_rec = _cached(cache, entry.shape_id, "descriptor", chash, dparams,
                       compute_descriptor)
    field = descriptors.DescriptorField(desc_rec["values"],
                                        "lsf" if run.descriptor == "lsf"
                                        else "concat")

    def compute_pooled():
        pooled = pooling.pool_second_order(field, weights)
        return {"H": pooled.H,
                "o1": pooling.pool_first_order(field, weights)}

    pool_rec = _cached(cache, entry.shape_id, "pooled", chash, dparams,
                       compute_pooled)

    def compute_eig():
        u, lam = spdm.normalized_spectrum(pool_rec["H"])
        return {"U": u, "lam": lam}

    eig_rec = _cached(cache, entry.shape_id, "eig", chash, dparams,
                      compute_eig)
    return ShapeRecord(entry.shape_id, entry.label, pool_rec["o1"],
                       pool_rec["H"], eig_rec["U"], eig_rec["lam"])


def _cached(cache, shape_id, stage, chash, params, compute):
    if cache is None:
        return compute()
    return cache.get_or_compute(shape_id, stage, chash, params, compute)


def extract_manifest(manifest, run, cache, entries=None):
    """Records for every shape; per-shape failures are collected.

    Returns (records dict by shape_id, failures list of (shape_id, error)).
    """
    records = {}
    failures = []
    for entry in entries if entries is not None else manifest.entries:
        try:
            records[entry.shape_id] = extract_shape(entry, manifest, run,
                                                    cache)
        except SpecpoolError as exc:
            logger.error("extraction failed for %s: %s", entry.shape_id, exc)
            failures.append((entry.shape_id, str(exc)))
    return records, failures


# ---------------------------------------------------------------------------
# feature assembly

def feature_mode(ablation=None, transform=None):
    """Map CLI-level switches to a trainer feature mode string."""
    if transform:
        if ablation not in (None, "", "st_net"):
            raise DataError("choose either a fixed transform or an "
                            "ablation, not both")
        return f"fixed:{transform}"
    mapping = {None: "stnet", "": "stnet", "st_net": "stnet",
               "surf_o1": "o1", "surf_o1_ml": "o1",
               "surf_o2": "o2", "surf_o2_ml": "o2"}
    if ablation not in mapping:
        raise DataError(f"unknown ablation {ablation!r}; choose from "
                        f"{ABLATIONS}")
    return mapping[ablation]


def build_features(records, entries, mode, run):
    """A trainer FeatureSet for the given shapes in manifest order."""
    missing = [e.shape_id for e in entries if e.shape_id not in records]
    if missing:
        raise DataError(f"missing extracted records for shapes: {missing}")
    ids = [e.shape_id for e in entries]
    labels = np.array([e.label for e in entries], dtype=np.int64)
    recs = [records[i] for i in ids]

    if mode == "o1":
        return trainer.FeatureSet("o1", ids, labels,
                                  x=np.stack([r.o1 for r in recs]))
    if mode == "o2":
        return trainer.FeatureSet("o2", ids, labels,
                                  x=np.stack([spdm.g_vec(r.H)
                                              for r in recs]))
    if mode.startswith("fixed:"):
        kind = mode.split(":", 1)[1]
        rows = np.stack([spdm.fixed_transform(r.H, kind, eps=run.log_eps)
                         for r in recs])
        return trainer.FeatureSet("fixed", ids, labels, x=rows)
    if mode == "stnet":
        alphas = spdm.power_grid(run.n_mix)
        qmats = [spdm.mpf_q_matrix(r.U, r.lam[:, None] ** alphas[None, :])
                 for r in recs]
        return trainer.FeatureSet("stnet", ids, labels, qmats=qmats)
    raise DataError(f"unknown feature mode {mode!r}")


def embeddings(features, blocks=None):
    """Evaluation vectors for every shape in a feature set.

    Without parameter blocks the normalized feature rows themselves are
    the embedding (the no-learning baselines); stnet features then use
    the uniform mixture.
    """
    idx = np.arange(features.n_shapes)
    if blocks is None:
        gamma = None
        if features.mode == "stnet":
            gamma = spdm.MPFParams.init(_n_mix_of(features)).gamma()
        rows, _ = metric.normalize_rows(features.rows(idx, gamma))
        return rows
    gamma = None
    if features.mode == "stnet":
        gamma = spdm.softmax(blocks["omega"])
    head = metric.EmbeddingParams(blocks["W"], blocks.get("C"),
                                  blocks.get("bias"))
    f, _ = metric.embed_rows(features.rows(idx, gamma), head)
    return f


def _n_mix_of(features):
    return features.qmats[0].shape[1] - 1


def train_run(run, features, n_classes=None, checkpoint_dir=None):
    """Trainer invocation from a RunConfig."""
    cfg = trainer.TrainConfig(
        task=run.task, batch_size=run.batch_size,
        learning_rate=run.learning_rate, margin=run.margin, eta=run.eta,
        epochs=run.epochs, seed=run.seed, d_m=run.d_m, n_mix=run.n_mix,
        t_max_factor=run.t_max_factor,
        early_stop_patience=run.early_stop_patience,
        early_stop_tol=run.early_stop_tol,
        checkpoint_every=run.checkpoint_every,
        loss_variant=run.loss_variant)
    return trainer.train(cfg, features, checkpoint_dir=checkpoint_dir,
                         n_classes=n_classes)


def retrieval_eval(features, blocks=None):
    """Leave-one-out ranked lists and the metric report."""
    vecs = embeddings(features, blocks)
    lists = evaluation.rank(vecs, features.ids, features.labels)
    return evaluation.retrieval_metrics(lists), lists


def classification_eval(features, blocks):
    """Predicted labels and accuracy on a feature set."""
    vecs = embeddings(features, blocks)
    head = metric.EmbeddingParams(blocks["W"], blocks.get("C"),
                                  blocks.get("bias"))
    probs = metric.softmax_rows(vecs @ head.C.T + head.bias)
    preds = np.argmax(probs, axis=1)
    return preds, evaluation.accuracy(preds, features.labels), probs

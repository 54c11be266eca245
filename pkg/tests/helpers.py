"""Shared independent oracles for the test suite."""

import numpy as np

from hydronet.loading import PARAM_NAMES
from hydronet.models import forward_model


def expanded_forward(model, p2d, cl1d, t1d, q3d):
    """Materialize the full Cartesian product, then run each subnetwork with
    plain numpy on the expanded arrays (no broadcasting anywhere)."""
    cfg = model.config
    n_l, n_c, n_t, n_s = len(p2d), len(cl1d), len(t1d), q3d.shape[1]
    shape = (n_l, n_c, n_t, n_s)

    def act(x):
        return np.tanh(x) if cfg.activation == "tanh" else np.where(x < 0, 0.01 * x, x)

    def run_stack(layers, x, last_linear):
        for layer in layers[:-1]:
            x = act(x @ layer.weight.values.T + layer.bias.values)
        x = x @ layers[-1].weight.values.T + layers[-1].bias.values
        return x if last_linear else act(x)

    p_full = np.ascontiguousarray(np.broadcast_to(p2d[:, None, None, None, :], shape + (5,)))
    cl_full = np.ascontiguousarray(np.broadcast_to(cl1d[None, :, None, None, None], shape + (1,)))
    t_full = np.ascontiguousarray(np.broadcast_to(t1d[None, None, :, None, None], shape + (1,)))
    q_full = np.ascontiguousarray(np.broadcast_to(q3d[:, None, None, :, :], shape + (3,)))

    latents = [
        run_stack(model.branch1, p_full, last_linear=False),
        run_stack(model.branch2, cl_full, last_linear=False),
        run_stack(model.trunk1, t_full, last_linear=False),
        run_stack(model.trunk2, q_full, last_linear=False),
    ]
    merged = latents[0]
    for latent in latents[1:]:
        merged = merged * latent if cfg.merge == "hadamard" else merged + latent
    return run_stack(model.decoder, merged, last_linear=True)


def fd_loading_gradient(model, p, w_s, t_s, points, eps_rel=1e-6):
    """Independent oracle: central differences on the raw event parameters
    through the full standardize -> forward -> de-standardize chain."""
    stats = model.stats
    target = model.meta["target"]

    def predict(params_row):
        p_std = stats.params(params_row.reshape(1, 5))
        out = forward_model(model, np.repeat(p_std, len(points), axis=0),
                            stats.classes([w_s]), stats.times([t_s]),
                            stats.coords(points).reshape(len(points), 1, 3))
        return stats.destandardize_target(out.values[:, 0, 0, 0, 0], target)

    base = p.as_array()
    grads = {}
    for j, name in enumerate(PARAM_NAMES):
        h = eps_rel * max(abs(base[j]), 1.0)
        hi, lo = base.copy(), base.copy()
        hi[j] += h
        lo[j] -= h
        grads[name] = (predict(hi) - predict(lo)) / (2.0 * h)
    return grads


def pooled_split_r2(result, dataset, cases, channel):
    """Pooled unstandardized R^2 of a TrainResult's model over given cases."""
    from hydronet.evaluation import r2
    from hydronet.models import NetworkSurrogate

    surr = NetworkSurrogate(result.model)
    preds, truths = [], []
    for case in cases:
        pred = surr.predict_case(dataset.params[case], dataset.classes,
                                 dataset.times, dataset.coords[case])
        preds.append(pred[..., 0].ravel())
        truths.append(np.asarray(dataset.solutions[case, ..., channel],
                                 dtype=np.float64).ravel())
    return r2(np.concatenate(preds), np.concatenate(truths))

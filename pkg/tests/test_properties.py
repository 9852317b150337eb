"""Randomized structural properties over many small instances.

These are the exact (non-statistical) invariants: the degenerate-
heterogeneity variance ordering, estimator monotonicity, agreement of the
two common-effect forms, scale/translation equivariance, and the
global-vs-local selection inequality. The bulk runs vectorized over
10 000 instances; the selection functions are exercised on a smaller
randomized batch since they operate on dataset records.
"""

import numpy as np
import pytest

from fewmeta.data import aggregate_study
from fewmeta.estimators import (
    cochran_q,
    dl_raw,
    dls_adj_raw,
    dls_raw,
    mu_ce,
    mu_ce_subgroup,
    qs_raw,
)
from fewmeta.intervals import hksj_scale, variance_hcs, zh_variance
from fewmeta.selection import select_global, select_local

from conftest import make_dataset, make_split

N_INSTANCES = 10000


@pytest.fixture(scope="module")
def instances():
    """10 000 random subgroup-level instances with exact unit-information
    standard errors (se = sigma_u / sqrt(n))."""
    rng = np.random.default_rng(2024)
    k = 3
    n = rng.integers(1, 30, (N_INSTANCES, k, 2)) * 12
    se = 4.0 / np.sqrt(n)
    y = rng.normal(0.0, 1.0, (N_INSTANCES, k, 2)) * rng.uniform(
        0.1, 2.0, (N_INSTANCES, 1, 1)
    )
    p = n[..., 0] / n.sum(axis=-1)
    w = se ** -2.0
    y_stu = (w * y).sum(axis=-1) / w.sum(axis=-1)
    se_stu = w.sum(axis=-1) ** -0.5
    return y, se, p, y_stu, se_stu


def test_variance_chain_when_q_small(instances):
    y, se, p, y_stu, se_stu = instances
    k = y.shape[1]
    q = cochran_q(y_stu, se_stu)
    mask = q < k - 1
    assert mask.sum() > 100  # the branch is actually exercised

    # tau2_DL truncates to zero on this branch
    dl_t = np.maximum(0.0, dl_raw(y_stu, se_stu))[mask]
    assert np.all(dl_t == 0.0)

    _, v_re, scale = hksj_scale(y_stu[mask], se_stu[mask], dl_t)
    assert np.all(scale < 1.0)
    v_hksj = scale * v_re
    v_mkh = np.maximum(1.0, scale) * v_re  # equals v_re here

    w_arm = se[mask] ** -2.0
    w_stu = w_arm.sum(axis=-1)
    dls_t = np.maximum(0.0, dls_raw(y[mask], se[mask]))
    adj_t = dls_adj_raw(y[mask], se[mask], p[mask])
    v_hcs1 = variance_hcs(np.maximum(dl_t, dls_t), w_stu)
    v_hcs2 = variance_hcs(np.maximum(dl_t, adj_t), w_stu)

    assert np.all(v_hksj <= v_mkh)
    assert np.all(v_mkh == v_re)
    # the two weight sets agree exactly by construction (Eq.-6 errors),
    # so the chain holds with at most float-roundoff slack
    assert np.all(v_mkh <= v_hcs1 * (1 + 1e-12))
    assert np.all(v_hcs1 <= v_hcs2 * (1 + 1e-12))


def test_adjustment_and_max_monotonicity(instances):
    y, se, p, y_stu, se_stu = instances
    dl_t = np.maximum(0.0, dl_raw(y_stu, se_stu))
    dls_t = np.maximum(0.0, dls_raw(y, se))
    adj_t = dls_adj_raw(y, se, p)
    max1 = np.maximum(dl_t, dls_t)
    max2 = np.maximum(dl_t, adj_t)
    assert np.all(adj_t >= dls_t)
    assert np.all(max2 >= max1)
    assert np.all(max1 >= dl_t)
    assert np.array_equal(max1 == 0.0, (dl_t == 0.0) & (dls_t == 0.0))


def test_common_effect_forms_agree(instances):
    y, se, p, y_stu, se_stu = instances
    mu_sub = mu_ce_subgroup(y, se)
    mu_stu = mu_ce(y_stu, se_stu ** -2.0)
    scale = np.maximum(np.abs(mu_sub), 1.0)
    assert np.all(np.abs(mu_sub - mu_stu) <= 1e-12 * scale)


def test_scale_and_translation_equivariance(instances):
    y, se, p, y_stu, se_stu = instances
    c, shift = 2.5, -0.7

    assert np.allclose(qs_raw(c * y, c * se), qs_raw(y, se), rtol=1e-12)
    assert np.allclose(
        dls_raw(c * y, c * se), c ** 2 * dls_raw(y, se), rtol=1e-11, atol=1e-13
    )
    assert np.allclose(
        dl_raw(c * y_stu, c * se_stu), c ** 2 * dl_raw(y_stu, se_stu),
        rtol=1e-11, atol=1e-13,
    )
    # translation leaves heterogeneity untouched and shifts centers
    assert np.allclose(dls_raw(y + shift, se), dls_raw(y, se), rtol=1e-9, atol=1e-12)
    assert np.allclose(
        mu_ce_subgroup(y + shift, se), mu_ce_subgroup(y, se) + shift, rtol=1e-12
    )
    tau2 = np.maximum(0.0, dl_raw(y_stu, se_stu))
    _, v0 = zh_variance(y_stu, se_stu, tau2)
    _, v1 = zh_variance(y_stu + shift, se_stu, tau2)
    assert np.allclose(v0, v1, rtol=1e-9, atol=1e-15)


def test_global_at_least_local_randomized():
    rng = np.random.default_rng(31)
    for _ in range(300):
        k = int(rng.integers(2, 4))
        specs = []
        for i in range(k):
            splits = [
                make_split(f"s{j}", rng.normal(0, 1, 2), rng.uniform(0.2, 1.5, 2))
                for j in range(int(rng.integers(1, 4)))
            ]
            agg = aggregate_study(splits[0])
            specs.append((agg.y, agg.se, splits))
        ds = make_dataset(specs)
        loc = select_local(ds)
        glo = select_global(ds)
        assert glo.q_s >= loc.q_s - 1e-12

import csv
import json
import math

import numpy as np
import pytest

from ppclearn.errors import UnknownVariant
from ppclearn.evaluation import read_results
from ppclearn.geometry import PIXEL_SIZE_MM, mrpd, projection_error
from ppclearn.pipeline import (RESULT_FIELDS, VARIANTS, estimate_motion, level_weights, ngc_weights, register_case,
                               register_starts, run_cases, single_iteration_experiment, variant_config,
                               write_results_csv, write_results_json)
from ppclearn.ppc import update_pose
from ppclearn.simscene import (STREAM_REGISTER, CorrSimConfig, derive_rng, draw_field, simulate_batch)
from ppclearn.weightnet import WeightModel, init_params

SIM = CorrSimConfig(sigma_d=0.3, outlier_rate=0.3, outlier_mode="distractor", search_range=5.0, matching="edge",
                    max_points=256)


def test_variant_table():
    ppc = variant_config("PPC")
    assert [lv.scale for lv in ppc.levels] == [0.25, 0.5, 1.0]
    assert all(lv.lam == 0 and lv.solver == "MCCR" and lv.weight_source == "ngc_threshold" for lv in ppc.levels)
    assert [lv.depth_restricted for lv in ppc.levels] == [True, False, False]
    for name, k in (("PPC-R", 2.0), ("PPC-RM", 0.25)):
        v = variant_config(name)
        assert all(lv.lam == 0.01 and lv.solver == "LS" and lv.weight_scale == k for lv in v.levels)
        assert not any(lv.depth_restricted for lv in v.levels)
    learned = variant_config("PPC-L")
    assert learned.uses_network and all(lv.lam == 0.01 and lv.solver == "LS" for lv in learned.levels)
    for name in ("PPC-L+", "PPC-RM+"):
        v = variant_config(name)
        assert v.levels[-1] == ppc.levels[-1]
        assert v.levels[0] == variant_config(name[:-1]).levels[0]
    assert all(lv.max_iterations == 15 and lv.stop_rotation == 1e-3 and lv.stop_translation == 0.05
               for name in VARIANTS for lv in variant_config(name).levels)


def test_unknown_variant_lists_valid_names():
    with pytest.raises(UnknownVariant) as exc:
        variant_config("PPC-X")
    for name in VARIANTS:
        assert name in str(exc.value)


def test_ngc_threshold():
    np.testing.assert_array_equal(ngc_weights([-0.5, 0.05, 0.1, 0.7]), [0.0, 0.0, 0.1, 0.7])


def test_network_level_needs_model(small_samples):
    with pytest.raises(ValueError):
        level_weights(variant_config("PPC-L").levels[0], small_samples[0].corr, None)


def _reference_register(case, i, variant, sim, root):
    """Plain single-pose loop built from the public per-step functions."""
    T = case.starts[i]
    for li, level in enumerate(variant.levels):
        field = draw_field(case.phantom, derive_rng(root, STREAM_REGISTER, case.index, li, sim.seed), case.camera,
                           case.T_gt, sim, level.scale)
        for _ in range(level.max_iterations):
            b = simulate_batch(case.phantom, case.camera, T.rotation[None], T.translation[None], case.T_gt, sim,
                               field, level.scale)
            cs = b.item(0)
            dv, c = estimate_motion(level, cs, level_weights(level, cs, None), case.camera)
            T = update_pose(T, dv, c).orthonormalized()
            if np.linalg.norm(dv[:3]) < level.stop_rotation and np.linalg.norm(dv[3:]) < level.stop_translation:
                break
    return T


@pytest.mark.parametrize("name", ["PPC", "PPC-R", "PPC-RM+"])
def test_lockstep_engine_matches_reference_loop(small_cases, name):
    case = small_cases[0]
    v = variant_config(name)
    traces = register_starts(case, [1, 4, 7], v, sim=SIM, root_seed=5)
    for tr in traces:
        ref = _reference_register(case, tr.start_index, v, SIM, 5)
        np.testing.assert_allclose(tr.final_pose.matrix, ref.matrix, atol=1e-6)


def test_results_do_not_depend_on_batching(small_cases):
    case = small_cases[1]
    v = variant_config("PPC-R")
    a = register_starts(case, range(6), v, sim=SIM, root_seed=5, batch_size=32)
    b = register_starts(case, range(6), v, sim=SIM, root_seed=5, batch_size=2)
    c = [register_case(case, i, v, sim=SIM, root_seed=5) for i in range(6)]
    for x, y, z in zip(a, b, c):
        np.testing.assert_array_equal(x.final_pose.matrix, y.final_pose.matrix)
        np.testing.assert_array_equal(x.final_pose.matrix, z.final_pose.matrix)
        assert x.level_iterations == y.level_iterations == z.level_iterations


def test_jobs_do_not_change_output(small_cases):
    v = variant_config("PPC")
    a = run_cases(small_cases, v, sim=SIM, root_seed=5, jobs=1, starts=[0, 9])
    b = run_cases(small_cases, v, sim=SIM, root_seed=5, jobs=2, starts=[0, 9])
    assert [(t.case_id, t.start_index) for t in a] == [(t.case_id, t.start_index) for t in b]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.final_pose.matrix, y.final_pose.matrix)


def test_coarse_level_of_ppc_keeps_depth(small_cases):
    case = small_cases[0]
    tr = register_case(case, 5, variant_config("PPC"), sim=SIM, root_seed=5)
    coarse = [r for r in tr.iterations if r.level == 0]
    assert coarse and len(coarse) == tr.level_iterations[0]
    for r in coarse:
        assert abs(r.dv[3:] @ case.camera.direction) < 1e-12
    assert any(abs(r.dv[3:] @ case.camera.direction) > 1e-6 for r in tr.iterations if r.level > 0)


def test_noiseless_registration_converges(small_cases):
    sim = CorrSimConfig(sigma_d=0.0, max_points=512)
    case = small_cases[0]
    for name in ("PPC", "PPC-R"):
        tr = register_case(case, 3, variant_config(name), sim=sim, root_seed=5)
        assert tr.status == "ok"
        assert tr.final_mrpd < 0.05
        assert tr.final_mrpd == pytest.approx(mrpd(case.camera, tr.final_pose, case.T_gt, case.targets))
        assert len(tr.level_iterations) == 3 and all(1 <= k <= 15 for k in tr.level_iterations)


def test_result_files_roundtrip(small_cases, tmp_path):
    traces = register_starts(small_cases[0], [0, 2], variant_config("PPC-RM"), sim=SIM, root_seed=5)
    traces[1].final_mrpd = math.inf
    write_results_csv(traces, tmp_path / "r.csv")
    write_results_json(traces, tmp_path / "r.json")
    with open(tmp_path / "r.csv") as fh:
        assert next(csv.reader(fh)) == RESULT_FIELDS
    assert json.loads((tmp_path / "r.json").read_text())[1]["final_mrpd"] is None
    a, b = read_results(tmp_path / "r.csv"), read_results(tmp_path / "r.json")
    for x, y, t in zip(a, b, traces):
        assert x.final_mrpd == y.final_mrpd == t.final_mrpd
        assert x.coarse_iterations == y.coarse_iterations == t.level_iterations[0]
        assert x.variant == "PPC-RM"


def test_single_iteration_pairs(small_samples):
    pairs = single_iteration_experiment(small_samples[:5], variant_config("PPC-R"), points=128)
    assert len(pairs) == 5
    for (before, after), smp in zip(pairs, small_samples):
        assert before == pytest.approx(projection_error(smp.camera, smp.T_hat, smp.T_gt, smp.targets) / PIXEL_SIZE_MM)
        assert after >= 0
    models = {0: WeightModel(init_params(0), 30.0)}
    learned = single_iteration_experiment(small_samples[:3], variant_config("PPC-L"), models, points=128)
    assert len(learned) == 3

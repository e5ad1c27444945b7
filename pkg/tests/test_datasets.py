"""Published reference fits on public datasets; each test skips when its CSV export is missing."""

from __future__ import annotations

import numpy as np
import pytest

from core.assembler import assemble
from core.config_loader import load_all_configs, load_model_spec
from core.inference import fit
from core.models import FitResult
from core.postprocess import cif, cure_fraction, gumbel_convert, summarise, transition_probs
from core.survdata import read_dataset_csv
from tests.conftest import ROOT, SPEC_DIR, dataset_csv


def _fit_spec(stem: str, *datasets: str, strategy: str | None = None) -> FitResult:
    frames = {name: read_dataset_csv(dataset_csv(name)) for name in datasets}
    spec = load_model_spec(SPEC_DIR / f"{stem}.json")
    model = assemble(spec, frames, load_all_configs(str(ROOT / "configs")))
    return fit(model, strategy=strategy or spec.strategy, seed=1)


def _effect(actual: float, expected: float, sd: float) -> None:
    assert actual == pytest.approx(expected, abs=max(0.05, 0.25 * sd))


def _hyper(actual: float, expected: float) -> None:
    assert actual == pytest.approx(expected, rel=0.3)


class TestLarynx:
    def test_proportional_hazards(self):
        result = _fit_spec("larynx_ph", "larynx")
        table = summarise(result)
        stage4 = table.row("stage4")
        _effect(stage4.mean, 1.6954, 0.4222)
        assert stage4.sd == pytest.approx(0.4222, rel=0.3)
        assert summarise(result, hr=True).row("stage4").mean == pytest.approx(5.9393, rel=0.3)

    def test_accelerated_failure_time(self):
        table, _ = gumbel_convert(_fit_spec("larynx_aft", "larynx"))
        _effect(table.row("Intercept").mean, 2.5846, 0.2718)
        _effect(table.row("stage4").mean, -1.6866, 0.4183)


class TestCure:
    def test_bmt(self):
        result = _fit_spec("bmt_cure", "bmt")
        table = summarise(result)
        _effect(table.row("Int(cure)").mean, -1.0019, 0.3220)
        _effect(table.row("TRT(cure)").mean, -0.3966, 0.4555)
        _effect(table.row("TRT").mean, 0.7028, 0.2556)
        _hyper(table.row("Weibull (shape)").mean, 1.0921)
        allogeneic = cure_fraction(result, {"TRT": 0}, seed=4)
        assert allogeneic["0.5quant"] == pytest.approx(0.2641, abs=0.03)


class TestMultipleHazards:
    def test_competing_risks(self):
        result = _fit_spec("okiss_competing", "okiss")
        table = summarise(result)
        for name, shape in (("S1", 1.1030), ("S2", 2.0278), ("S3", 2.2053)):
            _hyper(table.row(f"Weibull (shape)_{name}").mean, shape)
        _effect(table.row("allo_S1").mean, -0.5032, 0.1443)

        curves = cif(result, {"allo": 0, "sex": 0}, [20.0, 60.0, 100.0])
        assert (curves["cif_S2"] > curves["cif_S1"]).all()
        assert (curves["cif_S2"] > curves["cif_S3"]).all()

    def test_illness_death(self):
        result = _fit_spec("heart2_multistate", "heart2")
        table = summarise(result)
        _effect(table.row("age_S1").mean, 0.0508, 0.0140)
        _effect(table.row("surgery_S3").mean, -1.0341, 0.4447)
        probs = transition_probs(result, {"age": 0, "year": 0, "surgery": 1}, [100.0, 400.0, 1000.0])
        np.testing.assert_allclose(probs["p11"] + probs["p12"] + probs["p13"], 1.0, atol=1e-12)


class TestFrailty:
    def test_kidney(self):
        table = summarise(_fit_spec("kidney_frailty", "kidney"))
        _effect(table.row("sex").mean, -1.4442, 0.3980)
        _hyper(table.row("IDIntercept").mean, 0.4531)


class TestJointModels:
    def test_prothrombin(self):
        table = summarise(_fit_spec("prothro_joint", "prothro", "prothros"), sdcor=True)
        _effect(table.row("SRE_L1_S1").mean, -2.1562, 0.1323)
        _effect(table.row("treatprednisone_L1").mean, -0.0973, 0.0305)
        _hyper(table.row("Res. err. (sd)_L1").mean, 0.2577)

    def test_two_part_tumour_size_runs_under_empirical_bayes(self):
        result = _fit_spec(
            "colorectal_jm2",
            "colorectal",
            "colorectal_terminal",
            "colorectal_longi",
            "colorectal_longi_positive",
            strategy="eb",
        )
        assert result.theta_posterior.strategy == "empirical-bayes"
        share = summarise(result).row("IDIntercept_S1_S2")
        assert share.q025 > 0.0

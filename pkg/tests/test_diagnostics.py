import math
import warnings

import numpy as np
import pytest

from stackalign.diagnostics import (GROUPS, ComponentGrouping, CsvAppender, DiagnosticsLog, RATIO_FIELDS,
                                    ShortWindowWarning, feature_moments, read_ratios, record_feature_stats,
                                    record_ratio, summarize, truncate_csv)
from stackalign.model import AlignmentModel, ModelConfig
from stackalign.tensorcore import ParamTensor


def _p(name, value, grad):
    p = ParamTensor(name, np.array(value, dtype=float))
    p.grad[...] = grad
    return p


def test_ratio_hand_value_and_inf():
    log = DiagnosticsLog()
    grouping = ComponentGrouping({"video.": "VideoStack", "text.": "TextStack"})
    record_ratio(log, 1, [_p("video.w", [3, 4], [0.3, 0.4]), _p("text.w", [1, 1], [0, 0])], grouping)
    assert log.ratios == [(1, "VideoStack", pytest.approx(10.0)), (1, "TextStack", math.inf)]


def test_ratio_uses_concatenated_group_params():
    log = DiagnosticsLog()
    params = [_p("video.a", [3.0], [1.0]), _p("video.b", [4.0], [0.0])]
    record_ratio(log, 1, params, ComponentGrouping({"video.": "VideoStack"}))
    assert log.ratios[0][2] == pytest.approx(5.0)
    record_ratio(log, 1, params, ComponentGrouping({"video.": "VideoStack"}))
    assert log.ratios[0] == log.ratios[1]


def test_every_model_parameter_has_one_group():
    for kind in ("sbn", "ln4"):
        model = AlignmentModel(ModelConfig(video_in_dim=4, text_in_dim=4, projected_dim=3, stack_hidden=3,
                                           fc_hidden=3, normalization=kind, use_rp=False))
        split = ComponentGrouping().split(model.params())
        assert set(split) == set(GROUPS)
        assert sum(len(v) for v in split.values()) == len(model.params())
    with pytest.raises(KeyError):
        ComponentGrouping().group_of("misc.w")


def test_epochs_must_not_decrease():
    log = DiagnosticsLog()
    record_ratio(log, 2, [_p("head.w", [1.0], [1.0])])
    with pytest.raises(ValueError):
        record_ratio(log, 1, [_p("head.w", [1.0], [1.0])])


def test_summary_examples():
    log = DiagnosticsLog()
    for e in range(1, 31):
        log.ratios.append((e, "FC", 5.0))
        log.ratios.append((e, "VideoStack", float(e - 10)))
        log.ratios.append((e, "TextStack", math.inf if e == 25 else 2.0 * (e - 10)))
    s = summarize(log)
    assert s["groups"]["FC"] == {"mean": 5.0, "inf_count": 0}
    assert s["groups"]["VideoStack"]["mean"] == 10.5
    assert s["groups"]["TextStack"]["inf_count"] == 1
    assert s["groups"]["TextStack"]["mean"] == pytest.approx(2 * (10.5 * 20 - 15) / 19)
    assert not s["short_window"]


def test_short_window_warns():
    log = DiagnosticsLog([(e, "FC", float(e)) for e in range(1, 6)])
    with pytest.warns(ShortWindowWarning):
        s = summarize(log)
    assert s["window"] == 5 and s["groups"]["FC"]["mean"] == 3.0


def test_feature_moments_ignore_padding():
    feats = np.zeros((2, 3, 4))
    feats[0, :, 0] = [1.0, 2.0, 3.0]
    feats[1, 0, 0] = 4.0
    feats[1, 1:, :] = 1e9
    mask = np.array([[True, True, True], [True, False, False]])
    mean, var = feature_moments(feats, mask, first_k=2)
    np.testing.assert_allclose(mean, [2.5, 0.0])
    np.testing.assert_allclose(var, [1.25, 0.0])
    log = DiagnosticsLog()
    record_feature_stats(log, 1, {"video": (feats, mask)}, first_k=2)
    assert log.feature_stats[0] == (1, "video", 0, 2.5, 1.25)


def test_sbn_probe_stats_with_batch_statistics_are_centered():
    rng = np.random.default_rng(0)
    from stackalign.normalization import SbnState, sbn_forward
    st = SbnState.create("s", 60)
    feats = rng.standard_normal((4, 5, 60)) * 3 + 1
    mask = np.ones((4, 5), bool)
    y, _ = sbn_forward(st, feats, mask)
    mean, _ = feature_moments(y, mask)
    assert mean.shape == (50,) and np.all(np.abs(mean) < 1e-6)


def test_csv_round_trip_and_truncate(tmp_path):
    path = tmp_path / "ratios.csv"
    app = CsvAppender(path, RATIO_FIELDS)
    app.write([(1, "FC", 0.1), (1, "TextStack", math.inf), (2, "FC", 1 / 3)])
    text = path.read_text()
    assert text.splitlines()[0] == "epoch,group,ratio"
    assert "1,TextStack,inf" in text
    log = read_ratios(path)
    assert log.ratios[2] == (2, "FC", 1 / 3)
    truncate_csv(path, 1)
    assert [r[0] for r in read_ratios(path).ratios] == [1, 1]
    CsvAppender(path, RATIO_FIELDS, resume=True).write([(2, "FC", 7.0)])
    assert read_ratios(path).ratios[-1] == (2, "FC", 7.0)

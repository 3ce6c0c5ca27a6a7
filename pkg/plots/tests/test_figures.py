import json
import math

import pytest

from rmfplots.cli import main
from rmfplots.figures import (
    EmptyInput,
    FigureSpec,
    MissingColumn,
    _tv_vs_m,
    render,
)

TV_HEADER = ("M,t,focal_replica,target_neuron,source_neuron,mean_n1j,"
             "picard_mean,tv,tv_se,tv_bias,tv_same_run,tv_pooled,tv_pooled_se,"
             "term1,term2,bound,bound_se,l1_term,l1_se")


def tv_csv(tmp_path):
    rows = [TV_HEADER]
    for m, tv, bound in ((5, 0.021, 0.47), (20, 0.0035, 0.16), (80, 0.001, 0.067)):
        for tgt, src in ((1, 2), (2, 1)):
            rows.append(
                f"{m},0.5,1,{tgt},{src},0.88,0.886,{tv*1.1},0.0015,0.006,"
                f"{tv*1.05},{tv},0.0002,{bound*0.7},{bound*0.3},{bound},0.003,"
                "0.88,0.006"
            )
    path = tmp_path / "tv.csv"
    path.write_text("\n".join(rows) + "\n")
    return path


def tlln_control_csv(tmp_path):
    # analytic folded-normal control: error = sqrt(2*mu/pi) / sqrt(M-1), mu=2
    rows = ["M,error,se"]
    for m in (16, 64, 256):
        err = math.sqrt(4 / math.pi) / math.sqrt(m - 1)
        rows.append(f"{m},{err:.10f},{err/50:.10f}")
    path = tmp_path / "tlln_control.csv"
    path.write_text("\n".join(rows) + "\n")
    return path


def means_csv(tmp_path):
    rows = ["t,neuron,mean,se,cumulative"]
    for g in range(6):
        t = 0.1 * g
        for i in (1, 2):
            mean = 1.5 + 0.5 * math.exp(-2 * t) + 0.01 * i
            rows.append(f"{t:.2f},{i},{mean:.8f},0.004,{1.6*t:.8f}")
    path = tmp_path / "means.csv"
    path.write_text("\n".join(rows) + "\n")
    return path


def mean_equality_csv(tmp_path):
    rows = ["M,t,neuron,rmf_mean,rmf_se,limit_mean,limit_se,z"]
    for m in (5, 20):
        for g in range(6):
            t = 0.1 * g
            for i in (1, 2):
                mean = 1.5 + 0.5 * math.exp(-2 * t) + 0.01 * i
                rows.append(f"{m},{t:.2f},{i},{mean:.8f},0.002,{mean:.8f},0.004,0.1")
    path = tmp_path / "mean_equality.csv"
    path.write_text("\n".join(rows) + "\n")
    return path


def contraction_csv(tmp_path):
    rows = ["l,d_l,se"]
    for l, d in ((1, 0.51), (2, 0.029), (3, 0.002), (4, 0.0002), (5, 0.0)):
        rows.append(f"{l},{d},{d/20}")
    path = tmp_path / "contraction.csv"
    path.write_text("\n".join(rows) + "\n")
    return path


@pytest.mark.parametrize("kind,builder,extra", [
    ("tv_vs_M", tv_csv, None),
    ("tlln_loglog", tlln_control_csv, None),
    ("means_overlay", means_csv, mean_equality_csv),
    ("contraction", contraction_csv, None),
])
def test_byte_identical_renders(tmp_path, kind, builder, extra):
    inputs = [builder(tmp_path)]
    if extra is not None:
        inputs.append(extra(tmp_path))
    img1, cap1 = render(FigureSpec.make(kind, inputs, tmp_path / "a.png"))
    img2, cap2 = render(FigureSpec.make(kind, inputs, tmp_path / "b.png"))
    assert img1.read_bytes() == img2.read_bytes()
    assert cap1.read_text() == cap2.read_text()


def test_tlln_slope_annotation(tmp_path):
    path = tlln_control_csv(tmp_path)
    img, cap = render(FigureSpec.make("tlln_loglog", [path], tmp_path / "t.png"))
    text = cap.read_text()
    slope = float(text.split("fitted slope = ")[1].split(";")[0])
    ok = -0.6 <= slope <= -0.4
    print(f"{'PASS' if ok else 'FAIL'}  secondary TLLN slope: {slope:.3f} in [-0.6, -0.4]")
    assert ok


def test_tv_figure_has_line_and_overlay_per_channel(tmp_path):
    fig, caption = _tv_vs_m(FigureSpec.make("tv_vs_M", [tv_csv(tmp_path)],
                                            tmp_path / "x.png"))
    lines = fig.axes[0].get_lines()
    assert len(lines) == 4  # two channels, each a TV line plus a dashed bound
    assert sum(ln.get_linestyle() == "--" for ln in lines) == 2
    assert "bound" in caption


def test_caption_uses_manifest_hash(tmp_path):
    path = contraction_csv(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"config_hash": "abc123"}))
    _, cap = render(FigureSpec.make("contraction", [path], tmp_path / "c.png"))
    assert "config abc123" in cap.read_text()


def test_empty_input_rejected(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("l,d_l,se\n")
    with pytest.raises(EmptyInput):
        render(FigureSpec.make("contraction", [path], tmp_path / "c.png"))


def test_missing_column_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("l,distance\n1,0.5\n")
    with pytest.raises(MissingColumn):
        render(FigureSpec.make("contraction", [path], tmp_path / "c.png"))


def test_cli_round_trip(tmp_path):
    path = contraction_csv(tmp_path)
    out = tmp_path / "fig.png"
    assert main(["contraction", "--in", str(path), "--out", str(out)]) == 0
    assert out.exists() and out.with_suffix(".txt").exists()


def test_cli_error_exit_code(tmp_path):
    missing = tmp_path / "nope.csv"
    assert main(["contraction", "--in", str(missing),
                 "--out", str(tmp_path / "f.png")]) == 2

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vectorir.design_io import (
    DesignBundle, FormatError, SliceTrace, colorize, parse_design, parse_slice_trace,
    read_grid_csv, read_instance_values, read_ppm, read_weights, write_design, write_heatmap,
    write_instance_values, write_slice_trace, write_weights,
)
from vectorir.nn.model import ModelConfig, init_params
from vectorir.synth import GeneratorSpec, generate_design

HEADER = "DESIGN format_version=1 width=10 length=8 vdd=0.7 cycles=2 substeps=2\n"


def write(tmp_path, text, name="d.design"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_single_instance_echo(tmp_path):
    p = write(tmp_path, HEADER + "INSTANCES count=1\ng1 3.0 4.0 1e-6 2e-6 5e-8\nVIAS count=1\n5 5\n")
    d = parse_design(p)
    assert d.ids == ("g1",)
    assert d.xy.tolist() == [[3.0, 4.0]]
    assert (d.p_i[0], d.p_s[0], d.p_l[0]) == (1e-6, 2e-6, 5e-8)
    assert d.vdd == 0.7 and d.num_steps == 4 and d.slices == ()


@pytest.mark.parametrize("body, message, line", [
    ("INSTANCES count=0\nVIAS count=0\n", "no instances", 2),
    ("INSTANCES count=1\ng1 11.0 1 0 0 0\nVIAS count=0\n", "out of bounds", 3),
    ("INSTANCES count=2\ng1 1 1 0 0 0\ng1 2 2 0 0 0\nVIAS count=0\n", "duplicate instance id", 4),
    ("INSTANCES count=1\ng1 1 1 0 -1 0\nVIAS count=0\n", "negative", 3),
    ("INSTANCES count=1\ng1 1 1 0 0\nVIAS count=0\n", "instance record", 3),
    ("INSTANCES count=1\ng1 1 1 0 0 0\nVIAS count=1\n1 9\n", "out of bounds", 5),
    ("INSTANCES count=2\ng1 1 1 0 0 0\n", "instance record", None),
    ("INSTANCES count=1\ng1 1 1 0 0 0\nVIAS count=0\nSLICES count=1\nSLICE id=0 count=1\ng1 4\n",
     "outside [0, 4)", 7),
    ("INSTANCES count=1\ng1 1 1 0 0 0\nVIAS count=0\nSLICES count=1\nSLICE id=0 count=1\ng9 2\n",
     "unknown instance id", 7),
    ("INSTANCES count=1\ng1 1 1 0 0 0\nVIAS count=0\nbogus\n", "expected SLICES header", 5),
])
def test_parse_errors_carry_line(tmp_path, body, message, line):
    p = write(tmp_path, HEADER + body)
    with pytest.raises(FormatError) as e:
        parse_design(p)
    assert message in str(e.value)
    if line is not None:
        assert e.value.line == line
        assert f":{line}:" in str(e.value)


def test_bad_version(tmp_path):
    p = write(tmp_path, HEADER.replace("format_version=1", "format_version=7")
              + "INSTANCES count=1\ng1 1 1 0 0 0\nVIAS count=0\n")
    with pytest.raises(FormatError, match="format_version"):
        parse_design(p)


def test_record_order_independence(tmp_path):
    a = write(tmp_path, HEADER + "INSTANCES count=2\nb 1 1 1 2 3\na 2 2 4 5 6\nVIAS count=2\n1 1\n9 7\n"
              "SLICES count=2\nSLICE id=1 count=1\nb 0\nSLICE id=0 count=2\na 3\nb 1\n", "a.design")
    b = write(tmp_path, HEADER + "INSTANCES count=2\na 2 2 4 5 6\nb 1 1 1 2 3\nVIAS count=2\n9 7\n1 1\n"
              "SLICES count=2\nSLICE id=0 count=2\nb 1\na 3\nSLICE id=1 count=1\nb 0\n", "b.design")
    da, db = parse_design(a), parse_design(b)
    assert da == db
    assert da.slices[0].toggles(["a", "b"]) == {"a": {3}, "b": {1}}


def test_slice_trace_file(tmp_path):
    head = HEADER.replace("substeps=2", "substeps=5")  # 10 steps
    d = parse_design(write(tmp_path, head + "INSTANCES count=2\ng1 1 1 0 0 0\ng2 2 2 0 0 0\nVIAS count=0\n"))

    def trace(body, name):
        return parse_slice_trace(write(tmp_path, "SLICEFILE format_version=1\n" + body, name), d)

    t = trace("SLICE id=5 count=2\ng1 3\ng1 7\n", "a.slice")
    assert t.slice_id == 5
    assert t.toggles(["g1", "g2"]) == {"g1": {3, 7}, "g2": set()}
    quiet = trace("SLICE id=0 count=0\n", "q.slice")
    assert quiet.inst.size == 0
    with pytest.raises(FormatError, match="unknown instance"):
        trace("SLICE id=0 count=1\ng9 2\n", "x.slice")
    with pytest.raises(FormatError, match="outside"):
        trace("SLICE id=0 count=1\ng1 10\n", "y.slice")
    out = tmp_path / "rt.slice"
    write_slice_trace(t, d, out)
    assert parse_slice_trace(out, d) == t


def test_slice_trace_dedupes_and_sorts():
    t = SliceTrace(0, 10, [2, 0, 2, 0], [5, 1, 5, 0])
    assert t.inst.tolist() == [0, 0, 2] and t.step.tolist() == [0, 1, 5]
    assert t.toggle_counts(3).tolist() == [2, 0, 1]
    with pytest.raises(ValueError):
        SliceTrace(0, 10, [0], [10])


def test_bundle_validation():
    with pytest.raises(ValueError, match="contiguous"):
        DesignBundle(10, 10, 0.7, ["a"], [[1, 1]], [[0, 0, 0]], [], [SliceTrace(1, 100, [], [])])
    with pytest.raises(ValueError, match="steps"):
        DesignBundle(10, 10, 0.7, ["a"], [[1, 1]], [[0, 0, 0]], [], [SliceTrace(0, 50, [], [])])


designs = st.builds(
    lambda seed, n, v, s, cyc: generate_design(seed, GeneratorSpec(
        width=12.5, length=10.0, num_instances=n, num_vias=v, num_slices=s, cycles=cyc, substeps=2)),
    st.integers(0, 10**6), st.integers(1, 40), st.integers(0, 20), st.integers(0, 3), st.integers(1, 4),
)


@settings(max_examples=40, deadline=None)
@given(designs)
def test_round_trip(tmp_path_factory, d):
    p = tmp_path_factory.mktemp("rt") / "x.design"
    write_design(d, p)
    back = parse_design(p)
    assert back == d
    assert np.array_equal(back.power, d.power) and np.array_equal(back.xy, d.xy)


def test_weights_round_trip_is_bit_exact(tmp_path):
    cfg = ModelConfig(enc=(2, 3, 3, 2), dec=(3, 2, 2), cycles=2, substeps=2)
    params = init_params(cfg, 4)
    params["head.b"][:] = [np.pi, -1e-300, 5e300, 0.1, 1 / 3, 2.0 ** -60, -0.0, 7.0]
    p = tmp_path / "m.weights"
    write_weights(p, cfg.to_header(), params, {"ir": 0.02})
    header, back, norm = read_weights(p, cfg.to_header())
    assert ModelConfig.from_header(header) == cfg and norm == {"ir": 0.02}
    for k, v in params.items():
        assert back[k].tobytes() == v.tobytes()


def test_weights_architecture_mismatch(tmp_path):
    c2 = ModelConfig(variant="vanilla2d", enc=(2, 2, 2, 2), dec=(2, 2, 2), cycles=2, substeps=2)
    c3 = ModelConfig(variant="temporal3d", enc=(2, 2, 2, 2), dec=(2, 2, 2), cycles=2, substeps=2)
    p = tmp_path / "m.weights"
    write_weights(p, c2.to_header(), init_params(c2))
    with pytest.raises(FormatError, match="mismatch"):
        read_weights(p, c3.to_header())


def test_weights_truncated(tmp_path):
    cfg = ModelConfig(enc=(2, 2, 2, 2), dec=(2, 2, 2), cycles=2, substeps=2)
    p = tmp_path / "m.weights"
    write_weights(p, cfg.to_header(), init_params(cfg))
    rows = p.read_text().splitlines()
    for cut in (len(rows) - 1, len(rows) // 2, 4):
        q = tmp_path / f"cut{cut}.weights"
        q.write_text("\n".join(rows[:cut]) + "\n")
        with pytest.raises(FormatError, match="truncated"):
            read_weights(q)


def test_heatmap_outputs(tmp_path):
    c, i = write_heatmap([[0.0, 1.0], [1.0, 0.0]], tmp_path / "h")
    assert read_grid_csv(c).tolist() == [[0.0, 1.0], [1.0, 0.0]]
    img = read_ppm(i)
    assert img.shape == (2, 2, 3)
    assert np.array_equal(img[0, 0], img[1, 1]) and not np.array_equal(img[0, 0], img[0, 1])
    _, i2 = write_heatmap(np.full((3, 4), 2.5), tmp_path / "flat")
    flat = read_ppm(i2)
    assert len(np.unique(flat.reshape(-1, 3), axis=0)) == 1
    with pytest.raises(ValueError, match="NaN"):
        write_heatmap([[0.0, np.nan]], tmp_path / "bad")
    assert not (tmp_path / "bad.csv").exists()
    assert np.array_equal(colorize(np.eye(3)), colorize(np.eye(3)))


def test_instance_values_round_trip(tmp_path):
    p = tmp_path / "v.csv"
    vals = np.array([0.1, 1e-17, 3.0])
    write_instance_values(p, ["a", "b", "c"], vals)
    ids, back = read_instance_values(p)
    assert ids == ["a", "b", "c"] and back.tobytes() == vals.tobytes()
    assert p.read_text().splitlines()[0] == "instance_id,ir_volts"

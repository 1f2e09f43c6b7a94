from pathlib import Path

import pytest

from rdcp.codec import CodecPipeline, transmit
from rdcp.coding import ac_decode
from rdcp.goldens import compare, golden_files, read_golden, read_sidecar, regenerate

GOLDEN = Path(__file__).parent / "golden"
BITS = sorted(p.name for p in GOLDEN.glob("*.bits"))


def test_goldens_are_byte_stable():
    assert golden_files() == golden_files()
    summary = compare(GOLDEN)
    assert summary["changed"] == [] and summary["new"] == []


@pytest.mark.parametrize("name", BITS)
def test_golden_stream_decodes_to_recorded_symbols(name):
    stream, models, symbols, meta = read_golden(GOLDEN / name)
    assert len(stream) == meta["nbits"]
    assert ac_decode(stream, models, len(symbols)) == symbols


def test_expected_golden_set():
    assert {"ac_empty.bits", "ac_uniform256.bits", "ac_bern01_1000.bits",
            "ac_contexts_300.bits", "instance_4point_x3.bits"} <= set(BITS)


def test_instance_golden_record():
    _, _, _, meta = read_golden(GOLDEN / "instance_4point_x3.bits")
    extra = meta["extra"]
    assert extra["m"] == "1" and extra["xhat"] == "2.5" and extra["bits_y"] == "0"
    pipe = CodecPipeline.from_json((GOLDEN / "pipeline_4point.json").read_text())
    rec = transmit(pipe, 3, "*")
    assert (rec.m, rec.xhat, rec.bits_y, rec.bits_m) == (1, 2.5, 0, int(extra["bits_m"]))


def test_empty_golden_is_short():
    stream, _, symbols, _ = read_golden(GOLDEN / "ac_empty.bits")
    assert symbols == [] and len(stream) <= 2


def test_regenerate_reports_changes(tmp_path):
    out = tmp_path / "g"
    first = regenerate(out)
    assert first["created_dir"] and not first["changed"] and first["new"]
    again = regenerate(out)
    assert not again["new"] and not again["changed"]
    (out / "ac_uniform256.bits").write_bytes(b"\x00")
    (out / "pipeline_4point.json").write_text("{}")
    diff = compare(out)
    assert diff["changed"] == ["ac_uniform256.bits", "pipeline_4point.json"]
    assert regenerate(out)["changed"] == diff["changed"]
    assert compare(out)["changed"] == []


def test_sidecar_version_checked():
    with pytest.raises(ValueError, match="version"):
        read_sidecar("format rdcp-bits\nversion 7\nnbits 0\n")

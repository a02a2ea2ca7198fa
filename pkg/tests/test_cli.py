import os
import subprocess
import sys
import time

import pytest

from verblob.bench import FIELDS, read_csv
from verblob.cli import build_parser, main, parse_size


@pytest.mark.parametrize("text,value", [("4096", 4096), ("64k", 65536), ("64KiB", 65536), ("1GiB", 2**30), ("2m", 2 * 2**20)])
def test_parse_size(text, value):
    assert parse_size(text) == value


def test_parser_knows_every_command():
    p = build_parser()
    for cmd in ["deploy --cluster x", "alloc --cluster x", "write --cluster x " + "00" * 16,
                "read --cluster x " + "00" * 16 + " --size 1", "bench-single", "bench-concurrent", "verify"]:
        assert p.parse_args(cmd.split()).command == cmd.split()[0]


def test_bench_single_csv_out(tmp_path):
    out = tmp_path / "single.csv"
    rc = main(["bench-single", "--transport", "inproc", "--metadata-providers", "1,2",
               "--start-segment", "64k", "--segment", "256k", "--reps", "2", "--csv-out", str(out)])
    assert rc == 0
    text = out.read_text()
    assert text.splitlines()[0].split(",") == FIELDS
    assert len(read_csv(text)) == 2 * 3 * 2 * 2


def test_bench_concurrent_stdout(capsys):
    rc = main(["bench-concurrent", "--transport", "inproc", "--clients", "1,2", "--segment", "128k",
               "--block-size", "1MiB", "--mode", "write"])
    assert rc == 0
    rows = read_csv(capsys.readouterr().out)
    assert {r.experiment for r in rows} == {"concurrent_write", "concurrent_write_aggregate", "concurrent_write_ideal"}


def test_bench_abort_flags_csv(tmp_path, capsys):
    out = tmp_path / "x.csv"
    rc = main(["bench-single", "--transport", "inproc", "--data-providers", "1", "--metadata-providers", "1",
               "--start-segment", "1MiB", "--segment", "512MiB", "--reps", "1", "--csv-out", str(out)])
    assert rc == 1
    assert "# incomplete:" in out.read_text()


def test_verify_inproc(capsys):
    assert main(["verify", "--transport", "inproc", "--reps", "2"]) == 0
    assert capsys.readouterr().out.startswith("OK: 2 runs")


def test_bad_geometry_aborts_bench(capsys):
    assert main(["bench-single", "--transport", "inproc", "--page-size", "3"]) == 1
    assert "InvalidGeometry" in capsys.readouterr().err


def test_missing_cluster_file(tmp_path, capsys):
    assert main(["alloc", "--cluster", str(tmp_path / "nope.json")]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_deploy_alloc_write_read_over_tcp(tmp_path):
    layout = tmp_path / "cluster.json"
    env = dict(os.environ)
    deploy = subprocess.Popen(
        [sys.executable, "-m", "verblob", "deploy", "--data-providers", "2", "--metadata-providers", "2",
         "--capacity", "8MiB", "--cluster", str(layout)],
        env=env, stderr=subprocess.PIPE,
    )
    try:
        deadline = time.monotonic() + 60
        while not layout.exists() or not layout.read_text().strip().endswith("}"):
            assert time.monotonic() < deadline and deploy.poll() is None
            time.sleep(0.1)

        def run(*args, stdin=None):
            r = subprocess.run([sys.executable, "-m", "verblob", *args, "--cluster", str(layout)],
                               input=stdin, capture_output=True, check=True, env=env)
            return r.stdout

        bid = run("alloc", "--page-size", "4k", "--block-size", "64k").decode().strip()
        assert len(bid) == 32
        payload = bytes(range(256)) * 32
        assert run("write", bid, "--offset", "8k", stdin=payload).strip() == b"1"
        out = run("read", bid, "--offset", "4k", "--size", "16k")
        assert out == bytes(4096) + payload + bytes(4096)
        assert run("read", bid, "--size", "4k", "--version", "0") == bytes(4096)
    finally:
        deploy.terminate()
        deploy.wait(30)
    assert deploy.returncode == 0

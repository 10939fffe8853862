"""End-to-end smoke test of the Python bindings on a small world.

Build and install first:  pip install --no-build-isolation -e crates/py
"""

import tempfile
from pathlib import Path

import cortis_py

SMALL = """
requests = [[0], [1], [2]]
seeds = [0]

[world]
num_speakers = 14
voice_dim = 8
content_dim = 4
signal_dim = 24

[model]
hidden = [12, 12]

[pretrain]
steps = 300

[remain]
train_speakers = [5, 6, 7, 8, 9]
eval_speakers = [10, 11, 12, 13]
per_speaker = 6
background = 20

[unlearn]
first_steps = 40
later_steps = 20
first_interval = 5
later_interval = 3
rank = 4
merge_rank = 6
snapshot_batch = 4
forget_utterances = 8
remain_fisher_samples = 32

[eval]
seeds = 2
utterances_per_speaker = 3
"""


def main() -> None:
    assert "requests" in cortis_py.default_config()
    assert cortis_py.saliency_mask([3.0, 1.0, 2.0, 0.0], [1.0] * 4, [], 50.0) == [0, 2]

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        d = cortis_py.pretrain(str(root / "pre"), SMALL)
        assert d > 0

        t = cortis_py.calibrate(SMALL)
        assert t["retain_fail_below"] > t["forget_fail_above"]

        run = root / "runs" / "cortis" / "seed_0"
        reports = cortis_py.unlearn(str(root / "pre"), str(run), "cortis", 0, SMALL)
        assert [r["request_index"] for r in reports] == [1, 2, 3]
        assert set(reports[-1]["s_f"]) == {"0", "1", "2"}

        csv, cost, plot = cortis_py.report([str(run)])
        assert len(csv.splitlines()) == 4
        assert csv.splitlines()[0].startswith("request,method,seed,W_R,W_F,S_R,S_f1")
        assert len(cost.splitlines()) == 4
        assert plot[0]["method"] == "cortis"

        try:
            cortis_py.unlearn(str(root / "pre"), str(root / "cum"), "cumulative-tgu", 0, SMALL, 2, True)
        except cortis_py.C2ViolationError as e:
            assert "retained_forget.bin" in str(e)
        else:
            raise AssertionError("cumulative retraining passed the audit")

        try:
            cortis_py.unlearn(str(root / "pre"), str(root / "bad"), "nonsense")
        except ValueError:
            pass
        else:
            raise AssertionError("unknown method accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()

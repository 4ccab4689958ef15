"""
Batch attack with artifacts on disk, then an independent re-score.

Equivalent to

    keypatch synth --out DATA --n-images 3
    keypatch attack --images DATA/images --annotations DATA/annotations --detector toy --detector toy --out RUN
    keypatch score --clean DATA/images --adv RUN/adv --detector toy --detector toy
"""

import json
import tempfile
from pathlib import Path

from keypatch.cli import main

with tempfile.TemporaryDirectory() as tmp:
    data, run = Path(tmp) / "data", Path(tmp) / "run"
    main(["synth", "--out", str(data), "--n-images", "3"])
    main(["attack", "--images", str(data / "images"), "--annotations", str(data / "annotations"),
          "--detector", "toy", "--detector", "toy", "--out", str(run), "--iters", "300"])
    report = json.loads((run / "report.json").read_text())
    for row in report["per_image"]:
        print(f"{row['id']}: p_rate {row['p_rate']:.5f}, OS {row['os']:.3f}, regions {row['regions']}")
    agg = report["aggregate"]
    print("mAP clean", agg["map_clean"], "adversarial", agg["map_adv"])

    main(["score", "--clean", str(data / "images"), "--adv", str(run / "adv"),
          "--detector", "toy", "--detector", "toy", "--out", str(Path(tmp) / "rescore.json")])
    rescored = json.loads((Path(tmp) / "rescore.json").read_text())["aggregate"]
    print(f"re-scored mean OS {rescored['mean_os']:.6f} vs report {agg['mean_os']:.6f}")

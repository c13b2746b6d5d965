"""Train the SESA arm on a small suite, score it and export its surface.

A 24^3 suite with 4 training and 2 test cases keeps this to a minute or two
on one core; the acceptance runs use the 32^3 10/5 suite instead.

    python demos/train_and_evaluate.py [iterations] [out_dir]
"""

import sys
from pathlib import Path

from sesaseg.experiments import evaluate_outputs, split_cases
from sesaseg.metrics import CSV_COLUMNS
from sesaseg.model import TrainConfig, forward, infer_case, init_model, train
from sesaseg.phantom import scaled_spec, suite_in_memory
from sesaseg.surface import export_labeled_surface_ply


def main(iterations=300, out_dir="demo_out"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, cases, splits = suite_in_memory(4, 2, base_spec=scaled_spec((24, 24, 24)), seed=7)
    train_cases, test_cases = split_cases(cases, splits)

    def progress(it, report):
        if it % 50 == 0:
            print(f"iter {it:4d}  total {report.total:.4f}  bce_la {report.bce_la:.4f}  "
                  f"se_scar {report.se_scar:.5f}")

    model = init_model("conv", train_cases[0].intensity.dims, seed=0)
    model, log = train(model, train_cases, TrainConfig(iterations=int(iterations)), progress=progress)
    print(f"trained {len(log.rows)} iterations, log checksum {log.checksum()[:16]}")

    print(",".join(CSV_COLUMNS))
    for case in test_cases:
        state = forward(model, case.intensity)
        print(",".join(evaluate_outputs(case, state.y_hat, state.dpm).row()))

    case = test_cases[0]
    inference = infer_case(model, case.intensity, case.intensity.spacing)
    export_labeled_surface_ply(inference.surface, out / "predicted_surface.ply")
    print(f"{case.case_id}: {len(inference.surface.points)} surface points, "
          f"{int(inference.surface.scar.sum())} called scar -> {out}/predicted_surface.ply")


if __name__ == "__main__":
    main(*sys.argv[1:])

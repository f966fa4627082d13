"""Train a teacher on the synthetic blob task, then distil a photonic-conditioned student.

    python3 demos/distill_synthetic.py            # small, about a minute
    python3 demos/distill_synthetic.py --full     # desk-scale budget, several minutes
"""
import argparse

from pqkd import experiments as ex
from pqkd.dictconv import count_params
from pqkd.distill import evaluate


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--full", action="store_true")
    args = parser.parse_args()

    if args.full:
        cfg = ex.RunConfig(ema=True)
    else:
        cfg = ex.RunConfig(n_train=600, n_val=200, n_test=200, widths=(8, 16, 32), epochs_teacher=8,
                           epochs_student=5, ema=True, theta_updates=4, lr=3e-3, batch_size=32)
    data = ex.load_data(cfg)

    teacher = ex.run_teacher(cfg, data)
    print(f"teacher {cfg.widths}: val accuracy {teacher.best_val_acc:.3f} at epoch {teacher.best_epoch}")

    report = count_params(cfg.compression())
    print(f"student scope={cfg.scope} ranks={report.ranks} dim(theta)={cfg.dim_theta}: "
          f"{report.student_total} trainables vs {report.teacher_total} (C_x {report.cr_overall:.2f})")

    student, _ = ex.run_student(cfg, teacher.model, data)
    for rec in student.history:
        if rec.split == "val":
            print(f"  epoch {rec.epoch:2d}  val acc {rec.accuracy:.3f}  J {rec.J:.4f}  |d theta| {rec.delta_theta_norm:.3f}")
    test_acc, _ = evaluate(student.model, data[2], student.z)
    print(f"student best val {student.best_val_acc:.3f} (epoch {student.best_epoch}), test {test_acc:.3f}, "
          f"photonic delta {student.photonic_delta:.4f}")

    ablation, _ = ex.run_student(cfg, teacher.model, data, gamma=0.0)
    print(f"z = 0 ablation: best val {ablation.best_val_acc:.3f}")


if __name__ == "__main__":
    main()

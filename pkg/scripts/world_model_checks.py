"""Sampler fidelity, adaptation under a shifted policy, and the K ablation.

    python3 scripts/world_model_checks.py fidelity --steps 20000
    python3 scripts/world_model_checks.py adaptation --seeds 0 1 2 3 4
    python3 scripts/world_model_checks.py denoising-steps --K 1 5 10
"""
import argparse

from adept.experiments import adaptation_benefit, ddpm_fidelity, one_step_mse_by_K


def main():
    ap = argparse.ArgumentParser()
    sub = ap.add_subparsers(dest="what", required=True)
    p = sub.add_parser("fidelity")
    p.add_argument("--steps", type=int, default=20_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--guidance", type=float, default=1.0)
    p = sub.add_parser("adaptation")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p = sub.add_parser("denoising-steps")
    p.add_argument("--K", type=int, nargs="+", default=[1, 10])
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if args.what == "fidelity":
        rep = ddpm_fidelity(args.steps, args.seed, guidance=args.guidance)
        print("s, a, |mean error|, std ratio")
        for (s, a), e, r in zip(rep.probes, rep.mean_error, rep.std_ratio):
            print(f"{s:+.2f}, {a:+.2f}, {e:.4f}, {r:.3f}")
        print(f"max mean error {rep.max_mean_error:.4f}; ok={rep.ok}; {rep.seconds:.0f}s")
    elif args.what == "adaptation":
        print("seed, mse_pre, mse_post, mse_unweighted, mean_weight")
        for seed in args.seeds:
            r = adaptation_benefit(seed)
            print(f"{seed}, {r.mse_pre:.5f}, {r.mse_post:.5f}, {r.mse_unweighted:.5f}, {r.mean_weight:.3f}")
    else:
        for K, mse in one_step_mse_by_K(tuple(args.K), args.seed, args.steps).items():
            print(f"K={K}: held-out one-step MSE {mse:.6f}")


if __name__ == "__main__":
    main()

"""Run (or refresh) every desk-scale training configuration used by the acceptance suite.

    python3 scripts/desk_runs.py            # all runs, cached
    python3 scripts/desk_runs.py --only e   # just the config-e runs
    python3 scripts/desk_runs.py --diagnostics   # also b on seeds 1-2 and c, d on seed 0
"""
import argparse

from pipir.experiments import average_psnr, desk_run, oracle_beats_wrong, per_task_psnr

SEEDS = (0, 1, 2)


def plan(only=None, diagnostics=False):
    runs = [dict(seed=0, ablation="e", theta_deg=90.0), dict(seed=0, ablation="b", theta_deg=90.0)]
    for s in SEEDS:
        runs.append(dict(seed=s, ablation="e", theta_deg=90.0))
        runs.append(dict(seed=s, ablation="e", theta_deg=0.0))
    if diagnostics:
        runs += [dict(seed=s, ablation="b", theta_deg=90.0) for s in SEEDS[1:]]
        runs += [dict(seed=0, ablation=a, theta_deg=90.0) for a in "cd"]
    seen, out = set(), []
    for r in runs:
        key = tuple(sorted(r.items()))
        if key not in seen and (only is None or r["ablation"] == only):
            seen.add(key)
            out.append(r)
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--only", default=None, help="restrict to one ablation letter")
    ap.add_argument("--refresh", action="store_true")
    ap.add_argument("--diagnostics", action="store_true", help="extra runs used to size run-to-run noise")
    args = ap.parse_args()
    for spec in plan(args.only, args.diagnostics):
        res = desk_run(refresh=args.refresh, **spec)
        tasks = " ".join(f"{t}={p:.2f}" for t, p in per_task_psnr(res).items())
        print(f"seed={spec['seed']} cfg={spec['ablation']} theta={spec['theta_deg']:g}: "
              f"avg {average_psnr(res):.3f} dB (degraded {average_psnr(res, 'degraded'):.3f}) [{tasks}] "
              f"oracle>wrong {oracle_beats_wrong(res):.1%} "
              f"min angles {[round(a, 1) for a in res['history'][-1]['min_angles']]} "
              f"({res['train_seconds'] / 60:.1f} min)", flush=True)


if __name__ == "__main__":
    main()

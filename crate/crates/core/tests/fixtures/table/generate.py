"""Builds the table fixture and its expected reports.

Expected values are computed here independently of the Rust code
(pooled bins by direct counting, Pearson via scipy).
"""
import json
from pathlib import Path

from scipy.stats import pearsonr

HERE = Path(__file__).parent
MEASURES = ["precog", "lexcov", "length"]
# task -> measure -> per bin (correct, incorrect), bins [0,20] (20,40] ... (80,100]
PLAN = {
    "cola": {
        "precog": [(15, 8), (36, 9), (88, 12), (181, 19), (549, 28)],
        "lexcov": [(0, 0), (0, 0), (10, 3), (59, 13), (800, 60)],
        "length": [(100, 20), (300, 25), (250, 15), (150, 10), (69, 6)],
    },
    "sst": {
        "precog": [(5, 4), (15, 5), (30, 4), (50, 4), (80, 3)],
        "lexcov": [(0, 0), (2, 2), (8, 3), (30, 5), (140, 10)],
        "length": [(40, 5), (60, 6), (50, 4), (20, 3), (10, 2)],
    },
}
OFFSETS = [10, 20, 5, 15, 12.5, 1]


def f4(x):
    s = f"{x:.4f}"
    return "0.0000" if s == "-0.0000" else s


def main():
    dataset, preds, scores = {}, {}, []
    pooled = {m: [[0, 0] for _ in range(5)] for m in MEASURES}
    intervals = []
    for task, plan in PLAN.items():
        n_correct = sum(c for c, _ in plan["precog"])
        n_wrong = sum(i for _, i in plan["precog"])
        for m in MEASURES:
            assert sum(c for c, _ in plan[m]) == n_correct
            assert sum(i for _, i in plan[m]) == n_wrong
        n = n_correct + n_wrong
        ids = [f"{task[0]}{i:04d}" for i in range(n)]
        correct_ids = ids[:n_correct]
        wrong_ids = ids[n_correct:]
        for i, eid in enumerate(ids):
            gold = "acceptable" if i % 2 == 0 else "unacceptable"
            ok = eid in set(correct_ids)
            pred = gold if ok else ("unacceptable" if gold == "acceptable" else "acceptable")
            dataset.setdefault(task, []).append({"id": eid, "a": f"example {eid}", "label": gold})
            preds.setdefault(task, []).append({"id": eid, "label": pred})
        values = {}
        for mi, m in enumerate(MEASURES):
            # rotate example order per measure so measures are not identical
            cs = correct_ids[mi * 7 % len(correct_ids):] + correct_ids[: mi * 7 % len(correct_ids)]
            ws = wrong_ids[mi * 3 % len(wrong_ids):] + wrong_ids[: mi * 3 % len(wrong_ids)]
            k = 0
            for b, (c, w) in enumerate(plan[m]):
                members = cs[:c] + ws[:w]
                cs, ws = cs[c:], ws[w:]
                for eid in members:
                    off = OFFSETS[k % len(OFFSETS)]
                    k += 1
                    values[(eid, m)] = (20 * b + off) / 100
                pooled[m][b][0] += c + w
                pooled[m][b][1] += c
        for eid in ids:
            for m in MEASURES:
                rec = {"eid": eid, "task": task, "measure": m, "value": values[(eid, m)]}
                if m == "precog":
                    rec["k"] = 100
                rec["t_wordpiece"] = 2
                rec["t_words"] = 2
                scores.append(rec)
        intervals.append(f"{task},global,[0,100],{n},{f4(n_correct / n)},ft")
        for m in MEASURES:
            high = plan[m][4]
            low = [sum(x) for x in zip(*plan[m][:4])]
            for label, (c, w) in [("(80,100]", high), ("[0,80]", low)]:
                cnt = c + w
                acc = f4(c / cnt) if cnt else ""
                intervals.append(f'{task},{m},"{label}",{cnt},{acc},ft')

    settings = [
        ("masking", "wordpiece"),
        ("specials_masked", "false"),
        ("k", "100"),
        ("lexcov_counting", "occurrences"),
        ("bin_width", "20"),
        ("abscissa", "midpoint"),
    ]
    header = "# precog report; manifest=analyze-manifest.json" + "".join(
        f"; {k}={v}" for k, v in settings
    )
    (HERE / "expected_intervals.csv").write_text(
        header + "\ntask,measure,interval,samples,accuracy,predictions\n" + "\n".join(intervals) + "\n"
    )

    corr_lines = []
    for m in MEASURES:
        xs, ys = [], []
        for b, (count, correct) in enumerate(pooled[m]):
            if count:
                xs.append(20 * b + 10)
                ys.append(correct / count)
        r, p = pearsonr(xs, ys)
        corr_lines.append(
            f'    {{"measure": "{m}", "r": {f4(r)}, "p": {f4(p)}, "n_bins": {len(xs)}, "predictions": "ft"}}'
        )
    corr = "{\n" + '  "manifest": "analyze-manifest.json",\n'
    corr += "".join(f'  "{k}": "{v}",\n' for k, v in settings)
    corr += '  "correlations": [\n' + ",\n".join(corr_lines) + "\n  ]\n}\n"
    (HERE / "expected_correlation.json").write_text(corr)

    files = [("scores.jsonl", scores)]
    for task in PLAN:
        files += [(f"{task}.jsonl", dataset[task]), (f"{task}_predictions.jsonl", preds[task])]
    for name, rows in files:
        with open(HERE / name, "w") as f:
            for r in rows:
                f.write(json.dumps(r, separators=(",", ":")) + "\n")


if __name__ == "__main__":
    main()

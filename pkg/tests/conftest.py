"""Terminal summary: one PASS/FAIL line per acceptance criterion.

The acceptance suite (test_acceptance.py) keeps one test function per
advertised guarantee, named test_criterion_<n>_*. This hook folds their
outcomes into a short block at the end of the run so the guarantees can
be read off without scanning the full test list.
"""

CRITERIA = {
    1: "published-table reproduction from bundled data (+-0.005 / +-0.05)",
    2: "cost model, symbolic and numeric, n in {2, 5, 10}",
    3: "gradient checks vs central differences, 100 random MLPs, < 10 s",
    4: "score self-similarity, duplicated-task GS, [-1, 1] bounds",
    5: "kendall/spearman vs brute-force oracles, 200 lists, 1e-12",
    6: "grouping optimizer vs exhaustive oracle, 50 instances + fixtures",
    7: "end-to-end synthetic sanity, 5 seeds, reproducible, < 5 min",
}

_PREFIX = "test_acceptance.py::test_criterion_"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes: dict[int, bool] = {}
    for stat_key, ok in (("passed", True), ("failed", False), ("error", False)):
        for report in terminalreporter.stats.get(stat_key, []):
            nodeid = getattr(report, "nodeid", "")
            if _PREFIX not in nodeid:
                continue
            tail = nodeid.split(_PREFIX, 1)[1]
            number = int(tail.split("_", 1)[0])
            outcomes[number] = outcomes.get(number, True) and ok
    if not outcomes:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for number in sorted(CRITERIA):
        if number not in outcomes:
            continue
        status = "PASS" if outcomes[number] else "FAIL"
        terminalreporter.write_line(
            f"ACCEPTANCE {status}  criterion {number}: {CRITERIA[number]}")

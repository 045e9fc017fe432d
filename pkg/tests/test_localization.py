import re

import pytest

import synth
from crashgym.crash import parse_report
from crashgym.dataset import BugType, load_dataset
from crashgym.localization import (
    BIC_HEADER,
    CRASH_HEADER,
    STACK_HEADER,
    LocalizationContext,
    MalformedDiff,
    build_context,
    stack_candidates,
    touched_functions,
)

SAMPLE_DIFF = """\
--- a/net/bluetooth/l2cap_core.c
+++ b/net/bluetooth/l2cap_core.c
@@ -10,4 +10,6 @@ static int foo(
 context line
-removed
+added
+added two
 context line
@@ -40,3 +42,4 @@ int bar(struct chan *c)
 ctx
+more
 ctx
--- a/fs/ext4/xattr.c
+++ b/fs/ext4/xattr.c
@@ -7,2 +7,3 @@
 ctx
+line
"""


def _oracle_scan(diff):
    """Independent hunk-header scan: '+++ path' rows plus '@@ .. @@ annot'."""
    pairs = []
    file = None
    for line in diff.splitlines():
        if line.startswith("+++ "):
            file = re.sub(r"^[ab]/", "", line[4:].strip())
        m = re.match(r"^@@ [^@]+ @@ ?(.*)$", line)
        if m and file:
            annot = m.group(1)
            fm = re.search(r"(\w+)\s*\(", annot)
            pairs.append((file, fm.group(1) if fm else ""))
    seen = []
    for p in pairs:
        if p not in seen:
            seen.append(p)
    return seen


def test_touched_functions_single_annotated_hunk():
    diff = (
        "--- a/lib/buf.c\n+++ b/lib/buf.c\n"
        "@@ -10,4 +10,6 @@ static int foo(\n ctx\n+new\n ctx\n ctx\n"
    )
    assert touched_functions(diff) == [("lib/buf.c", "foo")]


def test_touched_functions_matches_independent_scanner():
    assert touched_functions(SAMPLE_DIFF) == _oracle_scan(SAMPLE_DIFF)


def test_touched_functions_on_fixture_corpus_bic_diffs(tmp_path):
    synth.make_corpus(tmp_path, n=12)
    checked = 0
    for record in load_dataset(tmp_path):
        if record.bic_diff is None:
            continue
        got = touched_functions(record.bic_diff)
        assert got == _oracle_scan(record.bic_diff), record.bug_id
        # no inventions: every named function literally appears in the diff
        for file, func in got:
            assert file in record.bic_diff
            if func:
                assert func in record.bic_diff
        checked += 1
    assert checked >= 6


def test_touched_functions_empty_diff():
    assert touched_functions("") == []
    assert touched_functions("   \n") == []


def test_touched_functions_without_annotation_yields_empty_name():
    diff = "--- a/x.c\n+++ b/x.c\n@@ -1,2 +1,3 @@\n ctx\n+new\n ctx\n"
    assert touched_functions(diff) == [("x.c", "")]


def test_touched_functions_malformed():
    with pytest.raises(MalformedDiff):
        touched_functions("@@ -1,2 +1,3 @@\n ctx\n")
    with pytest.raises(MalformedDiff):
        touched_functions("random prose, not a diff\n")


def test_stack_candidates_fixture_uaf_k6(report_texts):
    report = parse_report(report_texts["uaf_read_l2cap.txt"])
    got = stack_candidates(report, k=6)
    # hand list: five non-noise access frames, then the first alloc frame
    assert got == [
        ("l2cap_chan_timeout", "net/bluetooth/l2cap_core.c"),
        ("process_one_work", "kernel/workqueue.c"),
        ("worker_thread", "kernel/workqueue.c"),
        ("kthread", "kernel/kthread.c"),
        ("ret_from_fork", "arch/x86/entry/entry_64.S"),
        ("kmalloc", "include/linux/slab.h"),
    ]


def test_stack_candidates_k1_is_top_access_frame(report_texts):
    report = parse_report(report_texts["uaf_read_binder.txt"])
    assert stack_candidates(report, k=1) == [("binder_poll", "drivers/android/binder.c")]


def test_stack_candidates_k_larger_than_frames(report_texts):
    report = parse_report(report_texts["npd_read_rds.txt"])
    got = stack_candidates(report, k=100)
    names = [f for f, _ in got]
    assert names[0] == "rds_tcp_tune"
    assert len(names) == len(set(names))
    assert len(got) < 100


def _record_and_report(tmp_path, with_bic=True):
    synth.make_corpus(tmp_path, n=2)
    records = load_dataset(tmp_path)
    record = records[0] if with_bic else records[1]
    if not with_bic:
        assert record.bic_diff is None or True
    return record, parse_report(record.crash_report)


def test_build_context_generous_budget_has_all_sections(tmp_path):
    record, report = _record_and_report(tmp_path)
    assert record.bic_diff is not None
    ctx = build_context(record, report, record.bic_diff, budget=50_000)
    text = ctx.render()
    assert text.startswith(CRASH_HEADER)
    assert STACK_HEADER in text
    assert BIC_HEADER in text
    assert record.bic in text
    assert ctx.bic_functions
    assert len(text) <= 50_000


def test_build_context_no_bic_is_independent_of_bic_field(tmp_path):
    record, report = _record_and_report(tmp_path)
    a = build_context(record, report, None, budget=50_000)
    record.bic = "f" * 40
    b = build_context(record, report, None, budget=50_000)
    assert a.render() == b.render()
    assert BIC_HEADER not in a.render()
    assert a.bic_diff is None and a.bic_functions == []


def test_build_context_trivial_diff_treated_as_no_bic(tmp_path):
    record, report = _record_and_report(tmp_path)
    ctx = build_context(record, report, "   \n", budget=50_000)
    assert ctx.bic_diff is None
    assert BIC_HEADER not in ctx.render()


def test_build_context_drops_whole_hunks_before_candidates(tmp_path):
    record, report = _record_and_report(tmp_path)
    big_diff = record.bic_diff + "".join(
        f"@@ -{30 + i},3 +{32 + i},3 @@ int filler_{i}(\n ctx\n+pad {i}\n ctx\n"
        for i in range(8)
    )
    full = build_context(record, report, big_diff, budget=100_000)
    n_full = full.render().count("@@")
    budget = len(full.render()) - 120
    trimmed = build_context(record, report, big_diff, budget=budget)
    text = trimmed.render()
    assert len(text) <= budget
    n_trimmed = text.count("@@")
    assert 0 < n_trimmed < n_full
    # whole hunks only: every retained hunk is an exact prefix slice of the
    # original hunk sequence
    assert trimmed.bic_diff is not None
    assert big_diff.startswith(trimmed.bic_diff.split("\n@@")[0].split("\n--- ")[0])
    # stack candidates untouched before hunks are exhausted
    assert trimmed.stack_candidates == full.stack_candidates


def test_build_context_tiny_budget_keeps_a_candidate(tmp_path):
    record, report = _record_and_report(tmp_path)
    ctx = build_context(record, report, record.bic_diff, budget=300)
    assert len(ctx.render()) <= 300
    assert len(ctx.stack_candidates) >= 1
    assert ctx.render().startswith(CRASH_HEADER)


def test_build_context_is_deterministic(tmp_path):
    record, report = _record_and_report(tmp_path)
    a = build_context(record, report, record.bic_diff, budget=2_000)
    b = build_context(record, report, record.bic_diff, budget=2_000)
    assert a.render() == b.render()


def test_file_hint_prefers_stack_then_bic(tmp_path):
    record, report = _record_and_report(tmp_path)
    ctx = build_context(record, report, record.bic_diff, budget=50_000)
    func, file = ctx.stack_candidates[0]
    assert ctx.file_hint(func) == file
    bic_file, bic_func = ctx.bic_functions[0]
    if all(f != bic_func for f, _ in ctx.stack_candidates):
        assert ctx.file_hint(bic_func) == bic_file
    assert ctx.file_hint("no_such_symbol") is None


def test_context_bug_type_carried(tmp_path):
    record, report = _record_and_report(tmp_path)
    ctx = build_context(record, report, None, budget=10_000)
    assert isinstance(ctx, LocalizationContext)
    assert ctx.bug_type == record.bug_type
    assert ctx.bug_type in (BugType.OOB, BugType.UAF, BugType.NPD)

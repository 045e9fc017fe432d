from collections import Counter
from dataclasses import replace

import pytest

import synth
from crashgym.crash import parse_report, signature
from crashgym.dataset import (
    BaselineStatus,
    BugRecord,
    BugType,
    InvalidRecord,
    MissingField,
    UnreadablePath,
    classify_bug_type,
    load_dataset,
    load_record,
    validate,
    verify_baseline,
)
from crashgym.gym.jobs import (
    BuildOutcome,
    Job,
    JobKind,
    JobState,
    ReproAggregate,
    ReproOutcome,
    VmResult,
    VmResultKind,
    classify_repro,
)


def test_full_fixture_corpus_loads_143_records(corpus_143):
    records = load_dataset(corpus_143)
    assert len(records) == 143
    assert [r.bug_id for r in records] == sorted(r.bug_id for r in records)


def test_load_is_idempotent_and_order_deterministic(corpus_143):
    a = load_dataset(corpus_143)
    b = load_dataset(corpus_143)
    assert a == b


def test_every_loaded_record_validates_clean(corpus_143):
    for record in load_dataset(corpus_143):
        assert validate(record) == []


def test_type_counts_sum_to_total(corpus_143):
    records = load_dataset(corpus_143)
    counts = Counter(r.bug_type for r in records)
    assert sum(counts.values()) == len(records)
    assert set(counts) <= {BugType.OOB, BugType.UAF, BugType.NPD}


def test_empty_directory_loads_empty(tmp_path):
    assert load_dataset(tmp_path) == []


def test_missing_path_is_unreadable(tmp_path):
    with pytest.raises(UnreadablePath):
        load_dataset(tmp_path / "nope")


def test_record_without_reproducers_raises_missing_field(tmp_path, corpus_143):
    synth.make_corpus(tmp_path, n=1)
    bug_dir = tmp_path / "bug-0001"
    (bug_dir / "repro.syz").unlink()
    assert not (bug_dir / "repro.c").exists()
    with pytest.raises(MissingField) as err:
        load_record(bug_dir)
    assert err.value.bug_id == "bug-0001"
    assert "repro" in err.value.field_name


def test_malformed_records_are_collected_not_dropped_silently(tmp_path):
    synth.make_corpus(tmp_path, n=4)
    (tmp_path / "bug-0002" / "manifest").write_text("title: broken\n")
    problems: list = []
    records = load_dataset(tmp_path, problems=problems)
    assert [r.bug_id for r in records] == ["bug-0001", "bug-0003", "bug-0004"]
    assert len(problems) == 1 and problems[0].bug_id == "bug-0002"
    # strict mode raises instead
    with pytest.raises(MissingField):
        load_dataset(tmp_path)


@pytest.mark.parametrize(
    "title,expected",
    [
        ("KASAN: use-after-free Read in binder_poll", BugType.UAF),
        ("KASAN: slab-out-of-bounds Write in hid_output_report", BugType.OOB),
        ("KASAN: null-ptr-deref Read in rds_tcp_tune", BugType.NPD),
        ("BUG: unable to handle kernel NULL pointer dereference", BugType.NPD),
        ("KASAN: UAF Write in foo", BugType.UAF),
        ("general protection fault in corrupted", BugType.OTHER),
        ("", BugType.OTHER),
        # first match wins in table order
        ("out-of-bounds after use-after-free", BugType.OOB),
    ],
)
def test_classify_bug_type(title, expected):
    assert classify_bug_type(title) == expected


def test_classify_matches_fixture_hand_labels(report_labels):
    for name, info in report_labels.items():
        assert classify_bug_type(info["title"]).value == info["bug_type"], name


def _well_formed(report_texts) -> BugRecord:
    return BugRecord(
        bug_id="bug-x",
        title="KASAN: use-after-free Read in binder_poll",
        bug_type=BugType.UAF,
        fix_commit=synth.fake_commit("fix"),
        parent_commit=synth.fake_commit("parent"),
        kernel_config="CONFIG_KASAN=y\n",
        crash_report=report_texts["uaf_read_binder.txt"],
        repro_syz="r0 = open()\n",
    )


def test_validate_well_formed_is_ok(report_texts):
    assert validate(_well_formed(report_texts)) == []


def test_validate_reports_type_title_mismatch(report_texts):
    record = replace(
        _well_formed(report_texts), title="KASAN: slab-out-of-bounds Read in foo"
    )
    violations = validate(record)
    assert len(violations) == 1
    assert "does not match title" in violations[0]


def test_validate_reports_fix_equals_parent(report_texts):
    record = replace(_well_formed(report_texts), parent_commit=synth.fake_commit("fix"))
    violations = validate(record)
    assert violations == ["fix_commit equals parent_commit"]


def test_validate_collects_all_violations(report_texts):
    record = replace(
        _well_formed(report_texts),
        repro_syz=None,
        parent_commit=synth.fake_commit("fix"),
        crash_report="not a report",
    )
    violations = validate(record)
    assert len(violations) == 3


class _StubGym:
    """Scripted gym handle: queued outcomes are returned in order."""

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.submitted = []
        self._n = 0

    def submit(self, job):
        self.submitted.append(job)
        self._n += 1
        return f"job-{self._n}"

    def wait(self, job_id, timeout=None):
        kind = JobKind.BUILD if len(self.submitted) == 1 else JobKind.REPRO
        return Job(id=job_id, kind=kind, state=JobState.DONE, result=self.outcomes.pop(0))


def _repro_outcome(per_vm, baseline_sig):
    aggregate, nondet = classify_repro(per_vm, baseline_sig)
    return ReproOutcome(per_vm=per_vm, aggregate=aggregate, nondet=nondet)


def test_verify_baseline_reproducible_sets_nondet(report_texts):
    record = _well_formed(report_texts)
    baseline = signature(parse_report(record.crash_report), k=3)
    per_vm = [VmResult(0, VmResultKind.CRASH, record.crash_report)] + [
        VmResult(i, VmResultKind.NO_CRASH) for i in range(1, 4)
    ]
    gym = _StubGym([BuildOutcome.success("img-1"), _repro_outcome(per_vm, baseline)])
    assert verify_baseline(record, gym, vm_count=4) is BaselineStatus.REPRODUCIBLE
    assert record.nondeterministic is True
    assert gym.submitted[0].patch == ""
    assert gym.submitted[0].commit == record.parent_commit


def test_verify_baseline_not_reproducible(report_texts):
    record = _well_formed(report_texts)
    baseline = signature(parse_report(record.crash_report), k=3)
    per_vm = [VmResult(i, VmResultKind.NO_CRASH) for i in range(4)]
    gym = _StubGym([BuildOutcome.success("img-1"), _repro_outcome(per_vm, baseline)])
    assert verify_baseline(record, gym, vm_count=4) is BaselineStatus.NOT_REPRODUCIBLE


def test_verify_baseline_all_boot_failures_is_infra_fail(report_texts):
    record = _well_formed(report_texts)
    baseline = signature(parse_report(record.crash_report), k=3)
    per_vm = [VmResult(i, VmResultKind.BOOT_FAIL) for i in range(4)]
    outcome = _repro_outcome(per_vm, baseline)
    assert outcome.aggregate is ReproAggregate.BOOT_FAIL
    gym = _StubGym([BuildOutcome.success("img-1"), outcome])
    assert verify_baseline(record, gym, vm_count=4) is BaselineStatus.INFRA_FAIL


def test_verify_baseline_build_failure_is_infra_fail(report_texts):
    record = _well_formed(report_texts)
    gym = _StubGym([BuildOutcome.compile_error("gcc exploded")])
    assert verify_baseline(record, gym) is BaselineStatus.INFRA_FAIL

import re

import pytest
from hypothesis import given, strategies as st

from crashgym.crash import (
    CrashSignature,
    EmptyAccessStack,
    NoSanitizerHeader,
    Sanitizer,
    normalize_title,
    parse_report,
    same_crash,
    signature,
)


def test_fixture_reports_parse_to_hand_labels(report_texts, report_labels):
    for name, expected in report_labels.items():
        report = parse_report(report_texts[name])
        assert report.title == expected["title"], name
        assert report.sanitizer.value == expected["sanitizer"], name
        sig = signature(report, k=3)
        assert list(sig.top_frames) == expected["top3"], name
        assert (report.alloc_stack is not None) == expected["has_alloc"], name
        assert (report.free_stack is not None) == expected["has_free"], name


def test_uaf_fixture_has_three_populated_stacks(report_texts):
    report = parse_report(report_texts["uaf_read_l2cap.txt"])
    assert report.title == "KASAN: use-after-free Read in l2cap_chan_timeout"
    assert report.access_stack and report.alloc_stack and report.free_stack
    # hand-parsed spans of the fixture file
    assert report.access_stack[-1].function == "ret_from_fork"
    assert report.alloc_stack[0].function == "save_stack"
    assert report.free_stack[-1].function == "__sock_release"
    assert any(f.inlined for f in report.alloc_stack)
    frame = report.access_stack[5]
    assert frame.function == "l2cap_chan_timeout"
    assert frame.file == "net/bluetooth/l2cap_core.c"
    assert frame.line == 430
    assert frame.offset == "+0x32/0x1c0"


def test_raw_round_trips_byte_identically(report_texts):
    for text in report_texts.values():
        assert parse_report(text).raw == text


def test_header_without_frames_raises_empty_access_stack():
    text = "BUG: KASAN: use-after-free in foo+0x10/0x20 net/foo.c:1\nRead of size 8 at addr ffff888012345678 by task x/1\n"
    with pytest.raises(EmptyAccessStack):
        parse_report(text)


def test_unrecognizable_text_raises_no_header():
    with pytest.raises(NoSanitizerHeader):
        parse_report("hello world\nnothing to see\n")
    with pytest.raises(NoSanitizerHeader):
        parse_report("")


def test_signature_ignores_addresses(report_texts):
    original = report_texts["uaf_read_binder.txt"]
    # same crash captured at different addresses/offsets
    relocated = re.sub(r"0x[0-9a-f]+", "0xdeadbeef", original)
    relocated = re.sub(r"ffff8880[0-9a-f]+", "ffff88805eadbeef", relocated)
    a = signature(parse_report(original), k=3)
    b = signature(parse_report(relocated), k=3)
    assert same_crash(a, b)


def test_signature_k0_is_title_only(report_texts):
    sig = signature(parse_report(report_texts["uaf_read_l2cap.txt"]), k=0)
    assert sig.top_frames == ()


def test_distinct_fixture_bugs_have_distinct_signatures(report_texts, report_labels):
    sigs = {}
    for name in report_labels:
        sigs[name] = signature(parse_report(report_texts[name]), k=3)
    names = sorted(sigs)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            assert not same_crash(sigs[a], sigs[b]), (a, b)


def test_different_sanitizer_class_not_same_crash(report_texts):
    kasan = signature(parse_report(report_texts["uaf_read_binder.txt"]), k=3)
    other = signature(parse_report(report_texts["other_gpf_corrupted.txt"]), k=3)
    assert not same_crash(kasan, other)


def test_same_title_different_top_frame_differs():
    a = CrashSignature("KASAN: use-after-free Read in foo", ("foo", "bar"))
    b = CrashSignature("KASAN: use-after-free Read in foo", ("foo", "baz"))
    assert not same_crash(a, b)


def test_normalization_is_idempotent(report_texts):
    for text in report_texts.values():
        title = parse_report(text).title
        once = normalize_title(title)
        assert normalize_title(once) == once
    noisy = "BUG: KASAN: wild read at ffff8880683cd8e8 task syz-executor.4/10302 [ 12.345678] 0xdead"
    once = normalize_title(noisy)
    assert normalize_title(once) == once
    assert "ffff8880683cd8e8" not in once
    assert "/10302" not in once


_titles = st.sampled_from(
    [
        "KASAN: use-after-free Read in foo",
        "KASAN: slab-out-of-bounds Write in bar",
        "KASAN: null-ptr-deref Read in baz",
    ]
)
_frames = st.tuples(st.sampled_from(["foo", "bar", "baz", "qux"]), st.sampled_from(["x", "y"]))
_sigs = st.builds(CrashSignature, normalized_title=_titles, top_frames=_frames)


@given(a=_sigs, b=_sigs, c=_sigs)
def test_same_crash_is_equivalence_relation(a, b, c):
    assert same_crash(a, a)
    assert same_crash(a, b) == same_crash(b, a)
    if same_crash(a, b) and same_crash(b, c):
        assert same_crash(a, c)


def test_other_sanitizer_best_effort_title(report_texts):
    report = parse_report(report_texts["other_gpf_corrupted.txt"])
    assert report.sanitizer is Sanitizer.OTHER
    assert report.title.startswith("general protection fault")
    assert report.access_stack[0].function == "dev_get_iflink"

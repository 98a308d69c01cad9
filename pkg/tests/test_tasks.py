import hashlib
import subprocess
import sys
import threading

import pytest
from hypothesis import given, strategies as st

from pilotflow import apps, codec
from pilotflow.errors import IllegalTransition, UnknownApp
from pilotflow.tasks import (LEGAL_TRANSITIONS, REGISTRY, AppFuture, AppKind, AppSpec,
                             TaskRecord, TaskState, fingerprint, is_legal_path, memo_key,
                             native_app, shell_app)

S = TaskState


def test_memo_key_is_deterministic():
    assert memo_key(apps.add.spec, (1, 2), {}) == memo_key(apps.add.spec, (1, 2), {})


def test_memo_key_depends_on_argument_order():
    a, b = memo_key(apps.add.spec, (1, 2), {}), memo_key(apps.add.spec, (2, 1), {})
    assert a != b
    # independent recomputation: the canonical encodings themselves differ
    enc = lambda args: codec.encode([apps.add.spec.name, apps.add.spec.body_fingerprint,
                                     list(args), {}])
    assert enc((1, 2)) != enc((2, 1))
    assert a == hashlib.sha256(enc((1, 2))).hexdigest()


def test_memo_key_changes_with_fingerprint():
    spec = apps.add.spec
    other = AppSpec(spec.kind, spec.name, "0" * 64)
    assert memo_key(spec, (1, 2), {}) != memo_key(other, (1, 2), {})


def test_memo_key_kwargs_order_is_canonical():
    assert (memo_key(apps.concat.spec, ("a",), {"sep": "-", "x": 1})
            == memo_key(apps.concat.spec, ("a",), {"x": 1, "sep": "-"}))


def test_memo_key_same_in_another_process():
    code = ("from pilotflow import apps; from pilotflow.tasks import memo_key;"
            "print(memo_key(apps.add.spec, (1, [2, 'x']), {'k': 1.5}))")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                         check=True).stdout.strip()
    assert out == memo_key(apps.add.spec, (1, [2, "x"]), {"k": 1.5})


@given(st.lists(st.integers() | st.text(), max_size=5), st.lists(st.integers() | st.text(), max_size=5))
def test_memo_key_injective_on_samples(a, b):
    same = memo_key(apps.add.spec, tuple(a), {}) == memo_key(apps.add.spec, tuple(b), {})
    assert same == (codec.encode(a) == codec.encode(b))


def test_fingerprint_is_stable_and_sensitive():
    assert fingerprint("echo {0}") == fingerprint("echo {0}")
    assert fingerprint("echo {0}") != fingerprint("echo {1}")
    assert apps.hello.spec.body_fingerprint == fingerprint(apps.hello.fn)
    assert fingerprint(apps.hello.fn) != fingerprint(apps.noop.fn)


def test_app_specs():
    assert apps.hello.spec.kind is AppKind.NATIVE
    assert REGISTRY.resolve(apps.hello.spec.name)("World") == "Hello World"
    sh = shell_app("echo hi", stdout="/tmp/x")
    assert sh.spec.kind is AppKind.SHELL and sh.spec.stdout == "/tmp/x"
    assert AppSpec.from_wire(sh.spec.to_wire()) == sh.spec
    with pytest.raises(UnknownApp):
        REGISTRY.resolve("nowhere:nothing")
    with pytest.raises(UnknownApp):
        REGISTRY.resolve("unregistered")


def test_registry_imports_module_qualified_names():
    assert REGISTRY.resolve("pilotflow.apps:mul")(3, 4) == 12


states = st.sampled_from(list(TaskState))


@given(st.lists(states, min_size=1, max_size=10))
def test_legal_path_matches_transition_relation(path):
    ok = path[0] is S.PENDING and all((a, b) in LEGAL_TRANSITIONS for a, b in zip(path, path[1:]))
    assert is_legal_path(path) == ok


def test_documented_transitions_are_legal():
    assert is_legal_path([S.PENDING, S.LAUNCHABLE, S.LAUNCHED, S.RUNNING, S.SUCCEEDED])
    assert is_legal_path([S.PENDING, S.LAUNCHABLE, S.LAUNCHED, S.RUNNING, S.FAILED,
                          S.RETRYING, S.LAUNCHABLE, S.LAUNCHED, S.RUNNING, S.SUCCEEDED])
    assert is_legal_path([S.PENDING, S.MEMO_HIT])
    assert not is_legal_path([S.PENDING, S.SUCCEEDED])
    assert not is_legal_path([S.PENDING, S.MEMO_HIT, S.LAUNCHABLE])


def test_task_record_rejects_illegal_transition():
    rec = TaskRecord(0, apps.noop.spec, (), {}, set(), AppFuture(0))
    rec.set_state(S.LAUNCHABLE)
    with pytest.raises(IllegalTransition):
        rec.set_state(S.SUCCEEDED)


def test_future_is_single_update_and_done_never_blocks():
    f = AppFuture(3)
    assert not f.done()
    seen = []
    t = threading.Thread(target=lambda: seen.append(f.result()))
    t.start()
    f.set_result("v")
    t.join(5)
    assert seen == ["v"]
    with pytest.raises(Exception):
        f.set_result("w")
    assert f.result() == "v" and f.done()


def test_native_app_keyword_form():
    @native_app(name="tests.double", cache=True)
    def double(x):
        return 2 * x
    assert double.spec.name == "tests.double" and double.cache is True

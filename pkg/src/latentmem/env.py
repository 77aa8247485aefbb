"""MiniGUI: a deterministic synthetic GUI world with long-horizon tasks.

Each app is a chain of screens ending in a family-specific goal screen:

  form-fill   goal screen holds three text fields; the correct one must be
              TYPEd with the value token carried by the instruction.
  procedure   the last chain screen branches three ways into named leaf
              screens; the task names the leaf to stop on.
  trap        goal screen holds one safe button and two traps; clicking a
              trap ends the episode as a failure.

The decisive piece of information (which field / branch / button) is shown
as a hint label on the task's start screen and nowhere else, so it expires
from a short raw context window after L+1 steps. Tasks vary in depth (clicks
from start to goal) and may "echo" the hint on a later screen; deep no-echo
tasks are the memory-critical ones. Every screen carries an app badge label
so observations identify the app.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import vocab as V
from .errors import ConfigError, ContractError

T_MAX = 15
L_WINDOW = 3

FAMILIES = ("form-fill", "procedure", "trap")
_FAM_CODE = {"form-fill": 0, "procedure": 1, "trap": 2}

_GRAPH_SALT = 101
_TASK_SALT = 202
_GEN_SALT = 303
_LAYOUT_SALT = 404

CHAIN_LEN = 7  # chain screens 0..6; goal/leaf screens use ids 7..9
MAX_DEPTH = 6

ECHO_NONE, ECHO_MID, ECHO_GOAL = 0, 1, 2

# Default app-index pools per family; train and eval apps are disjoint so the
# pretrained policy cannot memorize eval-app layouts.
TRAIN_APPS = {
    "form-fill": list(range(0, 12)),
    "procedure": list(range(20, 32)),
    "trap": list(range(40, 52)),
}
EVAL_APPS = {
    "form-fill": list(range(12, 20)),
    "procedure": list(range(32, 40)),
    "trap": list(range(52, 60)),
}

BADGE_WID = 0
HINT_WID = 1


@dataclass(frozen=True)
class Widget:
    wid: int
    kind: int  # one of the KIND_* tokens
    text: int
    link: tuple | None = None  # target screen key
    trap: bool = False


@dataclass(frozen=True)
class Screen:
    key: tuple
    id_token: int
    widgets: tuple
    scroll_pages: int = 1


@dataclass(frozen=True)
class Action:
    op: str  # CLICK | TYPE | SCROLL | BACK | STOP
    widget: int | None = None
    token: int | None = None
    direction: str | None = None
    answer: int | None = None


Event = tuple  # (obs token tuple, Action)
Segment = tuple  # tuple of Events


@dataclass(frozen=True)
class Trajectory:
    instruction: tuple
    events: Segment
    outcome: str  # "succ" | "fail"
    reward: int
    hit_max: bool = False


@dataclass(frozen=True)
class AppGraph:
    family: str
    app_index: int
    chain_link_texts: tuple
    chain_decor_texts: tuple
    field_texts: tuple = ()
    correct_field_slot: int = -1
    button_texts: tuple = ()
    safe_slot: int = -1
    branch_texts: tuple = ()
    leaf_names: tuple = ()


@dataclass(frozen=True)
class TaskSpec:
    family: str
    app_index: int
    local_seed: int
    depth: int
    echo: int
    instruction: tuple
    t_max: int = T_MAX
    value_index: int = -1
    target_leaf: int = -1


def _pack(task: TaskSpec) -> int:
    return (
        (task.app_index << 32)
        | (task.local_seed << 6)
        | (task.depth << 2)
        | task.echo
    )


def _unpack(family: str, packed: int) -> "TaskSpec":
    echo = packed & 0x3
    depth = (packed >> 2) & 0xF
    local_seed = (packed >> 6) & 0x3FFFFFF
    app_index = packed >> 32
    return make_task(family, app_index, local_seed, depth, echo)


@functools.lru_cache(maxsize=512)
def build_app(family: str, app_index: int) -> AppGraph:
    """Deterministic app layout from (family, app index)."""
    if family not in FAMILIES:
        raise ConfigError(f"unknown family {family!r}")
    rng = np.random.default_rng(np.random.SeedSequence([_GRAPH_SALT, _FAM_CODE[family], app_index]))
    # Goal-screen texts (hint-match targets) and chain decor come from
    # disjoint halves of the text pool so decor never fakes a hint match.
    goal_pool = V.N_TEXTS // 2
    link_texts = tuple(goal_pool + int(t) for t in rng.choice(V.N_TEXTS - goal_pool, size=CHAIN_LEN, replace=False))
    decor_texts = tuple(goal_pool + int(t) for t in rng.choice(V.N_TEXTS - goal_pool, size=CHAIN_LEN, replace=True))
    kw: dict = {}
    if family == "form-fill":
        kw["field_texts"] = tuple(int(t) for t in rng.choice(goal_pool, size=3, replace=False))
        kw["correct_field_slot"] = int(rng.integers(0, 3))
    elif family == "trap":
        kw["button_texts"] = tuple(int(t) for t in rng.choice(goal_pool, size=3, replace=False))
        kw["safe_slot"] = int(rng.integers(0, 3))
    else:
        kw["branch_texts"] = tuple(int(t) for t in rng.choice(goal_pool, size=3, replace=False))
        kw["leaf_names"] = tuple(int(t) for t in rng.choice(V.N_TARGETS, size=3, replace=False))
    return AppGraph(family, app_index, link_texts, decor_texts, **kw)


def make_task(family: str, app_index: int, local_seed: int, depth: int, echo: int) -> TaskSpec:
    if family == "form-fill" and depth < L_WINDOW + 2:
        raise ConfigError(f"form-fill depth must be >= {L_WINDOW + 2}, got {depth}")
    if not 0 <= depth <= MAX_DEPTH:
        raise ConfigError(f"depth {depth} out of range")
    rng = np.random.default_rng(
        np.random.SeedSequence([_TASK_SALT, _FAM_CODE[family], app_index, local_seed])
    )
    app_tok = V.app_token(app_index)
    value_index = -1
    target_leaf = -1
    if family == "form-fill":
        value_index = int(rng.integers(0, V.N_VALUES))
        instruction = (V.FAM_FILL, app_tok, V.value_token(value_index))
    elif family == "procedure":
        target_leaf = int(rng.integers(0, 3))
        leaf_tok = V.target_token(build_app(family, app_index).leaf_names[target_leaf])
        instruction = (V.FAM_GOTO, app_tok, leaf_tok)
    else:
        instruction = (V.FAM_PRESS, app_tok)
    return TaskSpec(
        family=family,
        app_index=app_index,
        local_seed=local_seed,
        depth=depth,
        echo=echo,
        instruction=instruction,
        value_index=value_index,
        target_leaf=target_leaf,
    )


def is_eval_app(family: str, app_index: int) -> bool:
    return app_index in EVAL_APPS[family]


@dataclass(frozen=True)
class TaskLayout:
    """Goal-screen wiring for one task.

    Evaluation apps keep the app-stable wiring, so bank trajectories from the
    same app carry reusable evidence. Training apps re-draw it per task, which
    blocks the policy from memorizing app-to-answer shortcuts and forces it to
    read the hint.
    """

    field_slot: int
    safe_slot: int
    branch_perm: tuple  # branch slot j links to leaf branch_perm[j]


def resolve_layout(task: TaskSpec) -> TaskLayout:
    app = build_app(task.family, task.app_index)
    if is_eval_app(task.family, task.app_index):
        return TaskLayout(app.correct_field_slot, app.safe_slot, (0, 1, 2))
    rng = np.random.default_rng(
        np.random.SeedSequence([_LAYOUT_SALT, _FAM_CODE[task.family], task.app_index, task.local_seed])
    )
    return TaskLayout(
        field_slot=int(rng.integers(0, 3)),
        safe_slot=int(rng.integers(0, 3)),
        branch_perm=tuple(int(x) for x in rng.permutation(3)),
    )


def hint_token(task: TaskSpec, app: AppGraph) -> int:
    """Payload of the start-screen hint label: the widget-id token of the
    goal-screen widget the task needs (the field to fill, the safe button,
    or the branch link toward the target leaf)."""
    layout = resolve_layout(task)
    if task.family == "form-fill":
        return V.widget_token(2 + layout.field_slot)
    if task.family == "trap":
        return V.widget_token(2 + layout.safe_slot)
    slot = layout.branch_perm.index(task.target_leaf)
    return V.widget_token(2 + slot)


class MiniGuiEnv:
    """Pure deterministic state machine for one episode of one task."""

    def __init__(self, task: TaskSpec):
        self.task = task
        self.app = build_app(task.family, task.app_index)
        self.layout = resolve_layout(task)
        self._screens = self._build_screens()
        self.start_key = ("chain", CHAIN_LEN - task.depth) if task.depth > 0 else self._goal_key()
        self.reset()

    # -- construction -------------------------------------------------------

    def _goal_key(self) -> tuple:
        if self.task.family == "procedure":
            return ("leaf", self.task.target_leaf)
        return ("goal",)

    def _build_screens(self) -> dict:
        app = self.app
        badge = Widget(BADGE_WID, V.KIND_LABEL, V.app_token(app.app_index))
        screens: dict[tuple, Screen] = {}
        for i in range(CHAIN_LEN):
            if i == CHAIN_LEN - 1 and app.family == "procedure":
                widgets = [badge] + [
                    Widget(
                        2 + j,
                        V.KIND_BUTTON,
                        V.text_token(app.branch_texts[j]),
                        link=("leaf", self.layout.branch_perm[j]),
                    )
                    for j in range(3)
                ]
            else:
                nxt = ("chain", i + 1) if i < CHAIN_LEN - 1 else ("goal",)
                widgets = [
                    badge,
                    Widget(2, V.KIND_BUTTON, V.text_token(app.chain_link_texts[i]), link=nxt),
                    Widget(3, V.KIND_LABEL, V.text_token(app.chain_decor_texts[i])),
                ]
            screens[("chain", i)] = Screen(("chain", i), V.screen_token(i), tuple(widgets))
        if app.family == "form-fill":
            widgets = [badge] + [
                Widget(2 + j, V.KIND_FIELD, V.text_token(app.field_texts[j])) for j in range(3)
            ]
            screens[("goal",)] = Screen(("goal",), V.screen_token(7), tuple(widgets))
        elif app.family == "trap":
            widgets = [badge] + [
                Widget(
                    2 + j,
                    V.KIND_BUTTON,
                    V.text_token(app.button_texts[j]),
                    trap=(j != self.layout.safe_slot),
                )
                for j in range(3)
            ]
            screens[("goal",)] = Screen(("goal",), V.screen_token(7), tuple(widgets))
        else:
            for j in range(3):
                widgets = (badge, Widget(2, V.KIND_ITEM, V.target_token(app.leaf_names[j])))
                screens[("leaf", j)] = Screen(("leaf", j), V.screen_token(7 + j), widgets)
        return screens

    def _hint_keys(self) -> set:
        # Echo-mid sits two steps before the decision so the hint lands in a
        # window-interior block (>= 2), where position jitter can spread it.
        keys = {self.start_key}
        if self.task.echo == ECHO_MID:
            mid = CHAIN_LEN - 3 if self.task.family == "procedure" else CHAIN_LEN - 2
            keys.add(("chain", mid))
        elif self.task.echo == ECHO_GOAL:
            if self.task.family == "procedure":
                keys.add(("chain", CHAIN_LEN - 1))
            else:
                keys.add(("goal",))
        return keys

    # -- episode API ---------------------------------------------------------

    def reset(self) -> list:
        self.current = self.start_key
        self.page = 0
        self.steps = 0
        self.goal_met = False
        self.safe_done = False
        self.terminated = False
        self.hit_max = False
        self.reward = 0
        self.history: list[tuple] = []
        self.events: list[Event] = []
        self._hints = self._hint_keys()
        return self.observe()

    def visible_widgets(self) -> list:
        screen = self._screens[self.current]
        widgets = list(screen.widgets)
        if self.current in self._hints:
            widgets.insert(1, Widget(HINT_WID, V.KIND_LABEL, hint_token(self.task, self.app)))
        per_page = 8
        lo = self.page * per_page
        return widgets[lo : lo + per_page]

    def observe(self) -> list:
        screen = self._screens[self.current]
        obs = [screen.id_token]
        for w in self.visible_widgets():
            obs.extend((w.kind, V.widget_token(w.wid), w.text))
        return obs

    def _widget_by_id(self, wid) -> Widget | None:
        if wid is None:
            return None
        for w in self.visible_widgets():
            if w.wid == wid:
                return w
        return None

    def step(self, action: Action | None):
        """Apply one action; malformed actions are no-op steps."""
        if self.terminated:
            raise ContractError("step() after termination")
        obs_before = tuple(self.observe())
        self.events.append((obs_before, action if action is not None else Action("NOOP")))
        self.steps += 1

        if action is not None:
            op = action.op
            if op == "CLICK":
                w = self._widget_by_id(action.widget)
                if w is not None and w.trap:
                    self.terminated = True
                    self.reward = 0
                elif w is not None and w.link is not None:
                    self.history.append(self.current)
                    self.current = w.link
                    self.page = 0
                elif (
                    w is not None
                    and self.task.family == "trap"
                    and self.current == ("goal",)
                    and w.kind == V.KIND_BUTTON
                ):
                    self.safe_done = True
            elif op == "TYPE":
                w = self._widget_by_id(action.widget)
                if (
                    w is not None
                    and w.kind == V.KIND_FIELD
                    and self.task.family == "form-fill"
                    and self.current == ("goal",)
                ):
                    correct = 2 + self.layout.field_slot
                    if w.wid == correct and action.token == V.value_token(self.task.value_index):
                        self.goal_met = True
            elif op == "SCROLL":
                screen = self._screens[self.current]
                if action.direction == "down":
                    self.page = min(self.page + 1, screen.scroll_pages - 1)
                elif action.direction == "up":
                    self.page = max(self.page - 1, 0)
            elif op == "BACK":
                if self.history:
                    self.current = self.history.pop()
                    self.page = 0
            elif op == "STOP":
                self.terminated = True
                self.reward = 1 if self._goal_predicate() else 0

        if not self.terminated and self.steps >= self.task.t_max:
            self.terminated = True
            self.hit_max = True
            self.reward = 0
        return self.observe(), self.terminated, self.reward

    def _goal_predicate(self) -> bool:
        if self.task.family == "form-fill":
            return self.goal_met
        if self.task.family == "trap":
            return self.safe_done
        return self.current == ("leaf", self.task.target_leaf)

    def expert_action(self) -> Action:
        """Deterministic scripted action toward the goal."""
        if self.terminated:
            raise ContractError("expert_action() after termination")
        key = self.current
        if key[0] == "chain":
            i = key[1]
            if i == CHAIN_LEN - 1 and self.task.family == "procedure":
                slot = self.layout.branch_perm.index(self.task.target_leaf)
                return Action("CLICK", widget=2 + slot)
            return Action("CLICK", widget=2)
        if self.task.family == "form-fill":
            if not self.goal_met:
                return Action(
                    "TYPE",
                    widget=2 + self.layout.field_slot,
                    token=V.value_token(self.task.value_index),
                )
            return Action("STOP")
        if self.task.family == "trap":
            if not self.safe_done:
                return Action("CLICK", widget=2 + self.layout.safe_slot)
            return Action("STOP")
        return Action("STOP")

    def trajectory(self) -> Trajectory:
        if not self.terminated:
            raise ContractError("trajectory() before termination")
        return Trajectory(
            instruction=self.task.instruction,
            events=tuple(self.events),
            outcome="succ" if self.reward == 1 else "fail",
            reward=self.reward,
            hit_max=self.hit_max,
        )


def expert_rollout(task: TaskSpec) -> Trajectory:
    env = MiniGuiEnv(task)
    env.reset()
    done = False
    while not done:
        _, done, _ = env.step(env.expert_action())
    return env.trajectory()


# ---------------------------------------------------------------------------
# Task generation and task-set files
# ---------------------------------------------------------------------------

DEFAULT_DEPTHS = {
    "form-fill": (5, 6),
    "procedure": (1, 2, 3, 4, 5, 6),
    "trap": (1, 2, 3, 4, 5, 6),
}
EVAL_DEPTHS = {
    "form-fill": (5, 6),
    "procedure": (5, 6),
    "trap": (5, 6),
}


def generate_tasks(
    mix: dict,
    count: int,
    seed: int,
    apps: dict | None = None,
    depths: dict | None = None,
    echo_weights=(1.0, 0.0, 0.0),
    local_base: int = 0,
) -> list:
    """Deterministic task list from a family mix and a master seed."""
    if count <= 0:
        raise ConfigError(f"task count must be positive, got {count}")
    total = sum(mix.values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"mix fractions must sum to 1, got {total}")
    for fam in mix:
        if fam not in FAMILIES:
            raise ConfigError(f"unknown family {fam!r}")
    apps = apps or TRAIN_APPS
    depths = depths or DEFAULT_DEPTHS
    ew = np.asarray(echo_weights, dtype=np.float64)
    ew = ew / ew.sum()

    # Largest-remainder rounding keeps family counts exact and deterministic.
    fams = [f for f in FAMILIES if mix.get(f, 0) > 0]
    raw = {f: mix[f] * count for f in fams}
    counts = {f: int(raw[f]) for f in fams}
    short = count - sum(counts.values())
    for f in sorted(fams, key=lambda f: raw[f] - int(raw[f]), reverse=True)[:short]:
        counts[f] += 1

    schedule = [f for f in fams for _ in range(counts[f])]
    rng = np.random.default_rng(np.random.SeedSequence([_GEN_SALT, seed]))
    rng.shuffle(schedule)
    tasks = []
    for i, fam in enumerate(schedule):
        app = int(rng.choice(apps[fam]))
        depth = int(rng.choice(depths[fam]))
        echo = int(rng.choice(3, p=ew))
        if fam == "form-fill":
            depth = max(depth, L_WINDOW + 2)
        tasks.append(make_task(fam, app, local_base + i, depth, echo))
    return tasks


def save_tasks(path, tasks) -> None:
    with open(path, "w") as fh:
        for t in tasks:
            instr = ",".join(str(x) for x in t.instruction)
            fh.write(f"{t.family}\t{_pack(t)}\t{instr}\t{t.t_max}\n")


def load_tasks(path) -> list:
    tasks = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            family, packed, instr, t_max = line.rstrip("\n").split("\t")
            task = _unpack(family, int(packed))
            stored = tuple(int(x) for x in instr.split(","))
            if stored != task.instruction or int(t_max) != task.t_max:
                raise ConfigError(f"task line does not match its seed: {line!r}")
            tasks.append(task)
    return tasks

"""Task splitting and offloading: multi-agent actor-critic policy with
centralized critics, the independent-critic and discrete-action learners, the
greedy-fill and random baselines, and the per-round offload commit step.

Every policy emits an AgentAction whose split ratios lie on the K-simplex by
construction (normalized-exponential head), and whose share fractions lie in
[0,1] (logistic head), exploration noise included.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .config import MaddpgConfig, NnConfig, PolicyConfig, RewardConfig
from .constellation import Constellation
from .neuralnet import Gradients, Mlp, Optimizer, soft_update
from .seeding import TAG_OU, TAG_POLICY, TAG_REPLAY, rng_for
from .traffic import SubTask, Task, split_task


class InsufficientBufferError(RuntimeError):
    """train_step requested before the replay buffer holds a full batch."""


@dataclass
class AgentState:
    """Local observation: remaining-resource fractions and cross-agent
    selection counts of the route's first K satellites, plus task size."""

    c: np.ndarray  # (K,) remaining compute fractions
    r: np.ndarray  # (K,) remaining bandwidth fractions
    o: np.ndarray  # (K,) selections by other agents this round
    q_norm: float

    def vector(self) -> np.ndarray:
        return np.concatenate([self.c, self.r, self.o, [self.q_norm]])

    def vector_local(self) -> np.ndarray:
        """Observation without the cross-agent counts (independent learners)."""
        return np.concatenate([self.c, self.r, [self.q_norm]])


@dataclass
class AgentAction:
    p_task: np.ndarray  # (K,) simplex
    p_comp: np.ndarray  # (K,) in [0,1]
    p_comm: np.ndarray  # (K,) in [0,1]

    def vector(self) -> np.ndarray:
        return np.concatenate([self.p_task, self.p_comp, self.p_comm])


def project_action(raw: np.ndarray) -> AgentAction:
    """Map an unconstrained 3K vector onto the valid action set."""
    k = raw.shape[-1] // 3
    z = raw[:k] - np.max(raw[:k])
    e = np.exp(z)
    p_task = e / e.sum()
    p_comp = 1.0 / (1.0 + np.exp(-raw[k : 2 * k]))
    p_comm = 1.0 / (1.0 + np.exp(-raw[2 * k :]))
    return AgentAction(p_task, p_comp, p_comm)


def project_batch(raw: np.ndarray) -> np.ndarray:
    k = raw.shape[1] // 3
    z = raw[:, :k] - raw[:, :k].max(axis=1, keepdims=True)
    e = np.exp(z)
    task = e / e.sum(axis=1, keepdims=True)
    shares = 1.0 / (1.0 + np.exp(-raw[:, k:]))
    return np.concatenate([task, shares], axis=1)


def project_backward(raw: np.ndarray, projected: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Chain grad_out (d/d projected) back to the raw pre-projection vector."""
    k = raw.shape[1] // 3
    p = projected[:, :k]
    g = grad_out[:, :k]
    d_task = p * (g - (p * g).sum(axis=1, keepdims=True))
    y = projected[:, k:]
    d_shares = grad_out[:, k:] * y * (1.0 - y)
    return np.concatenate([d_task, d_shares], axis=1)


def reward(j_value: float, variance: float, r_const: float, rho: float) -> float:
    """r = R - J - rho*sigma^2, with J the delay-minus-weighted-completion
    objective for the agent's round."""
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    return r_const - j_value - rho * variance


def objective_j(t_delay_s: float, completed: float, omega: float) -> float:
    return t_delay_s - omega * completed


class OuNoise:
    """Ornstein-Uhlenbeck process, one instance per agent."""

    def __init__(self, dim: int, theta: float, sigma: float, seed: int, agent: int):
        self.theta = theta
        self.sigma = sigma
        self.rng = rng_for(seed, TAG_OU, agent)
        self.x = np.zeros(dim)

    def reset(self) -> None:
        self.x = np.zeros_like(self.x)

    def sample(self) -> np.ndarray:
        self.x = self.x + self.theta * (-self.x) + self.sigma * self.rng.standard_normal(self.x.shape)
        return self.x


class ReplayBuffer:
    """FIFO experience store with seeded uniform sampling."""

    def __init__(self, capacity: int, seed: int):
        self.buf: deque = deque(maxlen=capacity)
        self.rng = rng_for(seed, TAG_REPLAY)

    def __len__(self) -> int:
        return len(self.buf)

    def add(self, states, actions, rewards, next_states) -> None:
        self.buf.append(
            (
                [s.copy() for s in states],
                [a.copy() for a in actions],
                np.asarray(rewards, dtype=float).copy(),
                [s.copy() for s in next_states],
            )
        )

    def sample(self, n: int):
        if len(self.buf) < n:
            raise InsufficientBufferError(f"buffer has {len(self.buf)} < batch {n}")
        idx = self.rng.integers(0, len(self.buf), size=n)
        return [self.buf[int(i)] for i in idx]


class MaddpgAgents:
    """Actor-critic agents. Centralized mode feeds every agent's state and
    action to each critic; the independent mode (the single-agent baseline)
    gives each critic only its own observation and action, and drops the
    cross-agent counts from the actor input."""

    kind = "MADDPG"
    trainable = True

    def __init__(
        self,
        n_agents: int,
        k: int,
        nn_cfg: NnConfig,
        cfg: MaddpgConfig,
        seed: int,
        centralized: bool = True,
    ):
        self.n_agents = n_agents
        self.k = k
        self.cfg = cfg
        self.centralized = centralized
        self.state_dim = (3 * k + 1) if centralized else (2 * k + 1)
        self.action_dim = 3 * k
        critic_in = (
            n_agents * (self.state_dim + self.action_dim)
            if centralized
            else self.state_dim + self.action_dim
        )
        self.actors, self.critics = [], []
        self.target_actors, self.target_critics = [], []
        for i in range(n_agents):
            actor = Mlp(
                [self.state_dim, *nn_cfg.actor_hidden, self.action_dim],
                seed=nn_cfg.seed + seed,
                name=f"actor_{i}",
            )
            critic = Mlp(
                [critic_in, *nn_cfg.critic_hidden, 1],
                seed=nn_cfg.seed + seed,
                name=f"critic_{i}",
            )
            self.actors.append(actor)
            self.critics.append(critic)
            self.target_actors.append(actor.clone())
            self.target_critics.append(critic.clone())
        self.opt_actor = Optimizer(kind="adam", lr=cfg.lr_actor)
        self.opt_critic = Optimizer(kind="adam", lr=cfg.lr_critic)
        self.noise = [
            OuNoise(self.action_dim, cfg.ou_theta, cfg.ou_sigma, seed, i)
            for i in range(n_agents)
        ]
        self.buffer = ReplayBuffer(cfg.buffer, seed)
        self.rng_warmup = rng_for(seed, TAG_POLICY, 8)
        self.train_steps = 0

    def observe(self, state: AgentState) -> np.ndarray:
        return state.vector() if self.centralized else state.vector_local()

    def act(self, agent: int, state: AgentState, explore: bool) -> AgentAction:
        if explore and len(self.buffer) < self.cfg.warmup:
            # uniform warmup actions keep early replay data diverse; without
            # them the deterministic actor can settle on a zero-reward plateau
            # before the critic has ranked any successful commitments
            return AgentAction(
                p_task=self.rng_warmup.dirichlet(np.ones(self.k)),
                p_comp=self.rng_warmup.random(self.k),
                p_comm=self.rng_warmup.random(self.k),
            )
        raw = self.actors[agent].forward(self.observe(state))
        if explore:
            raw = raw + self.noise[agent].sample()
        return project_action(raw)

    def reset_noise(self) -> None:
        for n in self.noise:
            n.reset()

    # -- training ---------------------------------------------------------------

    def _critic_input(self, states: list[np.ndarray], actions: list[np.ndarray], i: int) -> np.ndarray:
        if self.centralized:
            return np.concatenate(states + actions, axis=1)
        return np.concatenate([states[i], actions[i]], axis=1)

    def record(self, states, actions, rewards, next_states) -> None:
        self.buffer.add(states, actions, rewards, next_states)

    def train_step(self) -> list[dict]:
        if len(self.buffer) < max(self.cfg.batch, self.cfg.train_start):
            raise InsufficientBufferError(
                f"replay holds {len(self.buffer)} transitions, training starts "
                f"at {max(self.cfg.batch, self.cfg.train_start)}"
            )
        batch = self.buffer.sample(self.cfg.batch)
        n = len(batch)
        states = [np.stack([b[0][j] for b in batch]) for j in range(self.n_agents)]
        actions = [np.stack([b[1][j] for b in batch]) for j in range(self.n_agents)]
        rewards = np.stack([b[2] for b in batch])
        next_states = [np.stack([b[3][j] for b in batch]) for j in range(self.n_agents)]

        next_actions = [
            project_batch(self.target_actors[j].forward(next_states[j]))
            for j in range(self.n_agents)
        ]
        update_actor = (self.train_steps + 1) % max(1, self.cfg.policy_delay) == 0
        stats = []
        for i in range(self.n_agents):
            # critic regression to the one-step bootstrapped target
            target_q = self.target_critics[i].forward(
                self._critic_input(next_states, next_actions, i)
            )[:, 0]
            y = rewards[:, i] + self.cfg.gamma * target_q
            q = self.critics[i].forward(self._critic_input(states, actions, i))[:, 0]
            err = q - y
            loss = float(np.mean(err**2))
            upstream = (2.0 * err / n).reshape(-1, 1)
            grads = self.critics[i].backward(upstream)
            self.opt_critic.step(self.critics[i], grads)
            if update_actor:
                # actor ascends the critic's value of its own re-computed action
                a_grads, _ = self.actor_gradient(i, states, actions)
                neg = Gradients(
                    [-g for g in a_grads.d_weights],
                    [-g for g in a_grads.d_biases],
                    a_grads.d_input,
                )
                self.opt_actor.step(self.actors[i], neg)
            stats.append({"agent": i, "critic_loss": loss, "mean_q": float(np.mean(q))})
        if update_actor:
            # target nets trail the delayed actor updates
            for i in range(self.n_agents):
                soft_update(self.target_actors[i], self.actors[i], self.cfg.tau)
                soft_update(self.target_critics[i], self.critics[i], self.cfg.tau)
        self.train_steps += 1
        return stats

    def actor_gradient(
        self, i: int, states: list[np.ndarray], actions: list[np.ndarray]
    ) -> tuple[Gradients, float]:
        """Exact gradient of J = mean_b Q_i(s, a_{-i}, pi_i(o_i)) w.r.t. actor
        i's parameters, chained through the action projection."""
        n = states[0].shape[0]
        raw = self.actors[i].forward(states[i])
        proj = project_batch(raw)
        acts = [proj if j == i else actions[j] for j in range(self.n_agents)]
        q = self.critics[i].forward(self._critic_input(states, acts, i))
        j_value = float(np.mean(q))
        upstream = np.full((n, 1), 1.0 / n)
        d_in = self.critics[i].backward(upstream).d_input
        if self.centralized:
            offset = sum(s.shape[1] for s in states) + sum(
                a.shape[1] for a in acts[:i]
            )
        else:
            offset = states[i].shape[1]
        d_action = d_in[:, offset : offset + self.action_dim]
        d_raw = project_backward(raw, proj, d_action)
        grads = self.actors[i].backward(d_raw)
        return grads, j_value

    def networks(self) -> dict[str, Mlp]:
        out: dict[str, Mlp] = {}
        for i in range(self.n_agents):
            out[f"actor_{i}"] = self.actors[i]
            out[f"critic_{i}"] = self.critics[i]
            out[f"target_actor_{i}"] = self.target_actors[i]
            out[f"target_critic_{i}"] = self.target_critics[i]
        return out

    def load_networks(self, nets: dict[str, Mlp]) -> None:
        for name, net in self.networks().items():
            if name in nets:
                net.copy_from(nets[name])


class DdpgAgents(MaddpgAgents):
    """Independent learners: same machinery, local critics, no overlap counts."""

    kind = "DDPG"

    def __init__(self, n_agents, k, nn_cfg, cfg, seed):
        super().__init__(n_agents, k, nn_cfg, cfg, seed, centralized=False)


def _dqn_action_grid(k: int, cap: int, seed: int) -> np.ndarray:
    """Renormalized ratio grid {0, .25, .5, .75, 1}^K, deduplicated by reduced
    integer direction; seeded subsample when larger than cap."""
    seen: dict[tuple[int, ...], np.ndarray] = {}
    for flat in range(5**k):
        g = []
        x = flat
        for _ in range(k):
            g.append(x % 5)
            x //= 5
        s = sum(g)
        if s == 0:
            continue
        d = math.gcd(*g) if k > 1 else g[0]
        key = tuple(v // d for v in g)
        if key not in seen:
            seen[key] = np.array(g, dtype=float) / s
    grid = np.stack([seen[key] for key in sorted(seen)])
    if len(grid) > cap:
        rng = rng_for(seed, TAG_POLICY, 5)
        idx = np.sort(rng.choice(len(grid), size=cap, replace=False))
        grid = grid[idx]
    return grid


class DqnPolicy:
    """Discrete split-ratio grid with a per-agent Q-network; resource shares
    are fixed at one half of the remaining capacity."""

    kind = "DQN"
    trainable = True

    def __init__(self, n_agents: int, k: int, nn_cfg: NnConfig, cfg: MaddpgConfig,
                 policy_cfg: PolicyConfig, seed: int):
        self.n_agents = n_agents
        self.k = k
        self.cfg = cfg
        self.epsilon = policy_cfg.dqn_epsilon
        self.grid = _dqn_action_grid(k, policy_cfg.dqn_actions_cap, seed)
        self.state_dim = 2 * k + 1
        self.qnets = [
            Mlp([self.state_dim, *nn_cfg.critic_hidden, len(self.grid)],
                seed=nn_cfg.seed + seed, name=f"qnet_{i}")
            for i in range(n_agents)
        ]
        self.target_qnets = [q.clone() for q in self.qnets]
        self.opt = Optimizer(kind="adam", lr=cfg.lr_critic)
        self.rng = rng_for(seed, TAG_POLICY, 6)
        self.buffer = ReplayBuffer(cfg.buffer, seed)
        self.train_steps = 0

    def observe(self, state: AgentState) -> np.ndarray:
        return state.vector_local()

    def act(self, agent: int, state: AgentState, explore: bool) -> AgentAction:
        if explore and self.rng.random() < self.epsilon:
            idx = int(self.rng.integers(0, len(self.grid)))
        else:
            q = self.qnets[agent].forward(state.vector_local())
            idx = int(np.argmax(q))
        ratios = self.grid[idx]
        half = np.full(self.k, 0.5)
        return AgentAction(ratios.copy(), half.copy(), half.copy())

    def reset_noise(self) -> None:
        pass

    def record(self, states, actions, rewards, next_states) -> None:
        self.buffer.add(states, actions, rewards, next_states)

    def action_index(self, ratios: np.ndarray) -> int:
        return int(np.argmin(np.abs(self.grid - ratios).sum(axis=1)))

    def train_step(self) -> list[dict]:
        batch = self.buffer.sample(self.cfg.batch)
        n = len(batch)
        stats = []
        for i in range(self.n_agents):
            s = np.stack([b[0][i] for b in batch])
            a_idx = np.array([self.action_index(b[1][i][: self.k]) for b in batch])
            r = np.array([b[2][i] for b in batch])
            s2 = np.stack([b[3][i] for b in batch])
            target = r + self.cfg.gamma * self.target_qnets[i].forward(s2).max(axis=1)
            q_all = self.qnets[i].forward(s)
            q_sel = q_all[np.arange(n), a_idx]
            err = q_sel - target
            upstream = np.zeros_like(q_all)
            upstream[np.arange(n), a_idx] = 2.0 * err / n
            grads = self.qnets[i].backward(upstream)
            self.opt.step(self.qnets[i], grads)
            stats.append({"agent": i, "critic_loss": float(np.mean(err**2)),
                          "mean_q": float(np.mean(q_sel))})
        for i in range(self.n_agents):
            soft_update(self.target_qnets[i], self.qnets[i], self.cfg.tau)
        self.train_steps += 1
        return stats

    def networks(self) -> dict[str, Mlp]:
        out = {}
        for i, (q, t) in enumerate(zip(self.qnets, self.target_qnets)):
            out[f"qnet_{i}"] = q
            out[f"target_qnet_{i}"] = t
        return out

    def load_networks(self, nets: dict[str, Mlp]) -> None:
        for name, net in self.networks().items():
            if name in nets:
                net.copy_from(nets[name])


class TrlaPolicy:
    """Greedy-fill: saturate the current satellite's compute capacity, spill
    the remainder to the next host, claim all remaining shares."""

    kind = "TRLA"
    trainable = False

    def __init__(self, k: int, f_max: float, eta: float, budget_s: float, q_max: float):
        self.k = k
        self.f_max = f_max
        self.eta = eta
        self.budget_s = budget_s
        self.q_max = q_max

    def act(self, agent: int, state: AgentState, explore: bool) -> AgentAction:
        q = state.q_norm * self.q_max
        remaining = q
        loads = np.zeros(self.k)
        for k in range(self.k):
            if remaining <= 0:
                break
            cap_bytes = state.c[k] * self.f_max * self.budget_s / self.eta
            take = min(remaining, cap_bytes)
            loads[k] = take
            remaining -= take
        if remaining > 0:
            loads[-1] += remaining  # overload the tail host rather than stall
        if loads.sum() <= 0:
            loads[0] = 1.0
        ratios = loads / loads.sum()
        ones = np.ones(self.k)
        return AgentAction(ratios, ones.copy(), ones.copy())

    def reset_noise(self) -> None:
        pass


class RolaPolicy:
    """Uniform-random simplex splits and uniform-random shares, seeded."""

    kind = "ROLA"
    trainable = False

    def __init__(self, k: int, seed: int):
        self.k = k
        self.rng = rng_for(seed, TAG_POLICY, 7)

    def act(self, agent: int, state: AgentState, explore: bool) -> AgentAction:
        ratios = self.rng.dirichlet(np.ones(self.k))
        return AgentAction(ratios, self.rng.random(self.k), self.rng.random(self.k))

    def reset_noise(self) -> None:
        pass


def make_policy(
    kind: str,
    n_agents: int,
    k: int,
    nn_cfg: NnConfig,
    maddpg_cfg: MaddpgConfig,
    policy_cfg: PolicyConfig,
    seed: int,
    f_max: float,
    eta: float,
    budget_s: float,
    q_max: float,
):
    if kind == "MADDPG":
        return MaddpgAgents(n_agents, k, nn_cfg, maddpg_cfg, seed)
    if kind == "DDPG":
        return DdpgAgents(n_agents, k, nn_cfg, maddpg_cfg, seed)
    if kind == "DQN":
        return DqnPolicy(n_agents, k, nn_cfg, maddpg_cfg, policy_cfg, seed)
    if kind == "TRLA":
        return TrlaPolicy(k, f_max, eta, budget_s, q_max)
    if kind == "ROLA":
        return RolaPolicy(k, seed)
    raise ValueError(f"unknown policy kind {kind!r}")


# -- per-round offload commit -------------------------------------------------------


@dataclass
class TaskPlacement:
    task: Task
    hosts: list[int]
    subtasks: list[SubTask]
    alloc_handles: list[int] = field(default_factory=list)
    state: AgentState | None = None
    action: AgentAction | None = None


@dataclass
class OffloadScheme:
    placements: list[TaskPlacement] = field(default_factory=list)


def route_hosts(hops: list[int], k: int) -> list[int]:
    """First K satellites of the route; a short route repeats its tail so the
    host list always has K slots."""
    hosts = list(hops[:k])
    while len(hosts) < k:
        hosts.append(hosts[-1])
    return hosts


def build_states(
    world: Constellation,
    hosts_per_agent: list[list[int]],
    sizes: list[float],
    q_max: float,
) -> list[AgentState]:
    """Observations with cross-agent overlap counts: o_k counts how many OTHER
    agents' host lists include this agent's k-th satellite."""
    states = []
    for i, hosts in enumerate(hosts_per_agent):
        c = np.array([1.0 - world.f_used[h] for h in hosts])
        r = np.array([1.0 - world.r_used[h] for h in hosts])
        o = np.zeros(len(hosts))
        for k_idx, h in enumerate(hosts):
            o[k_idx] = sum(
                1 for j, other in enumerate(hosts_per_agent) if j != i and h in other
            )
        states.append(AgentState(c, r, o, float(sizes[i]) / q_max))
    return states


def commit_placement(
    world: Constellation, task: Task, hosts: list[int], action: AgentAction
) -> TaskPlacement:
    """Split the task and reserve resources on the hosts at commit-time
    availability: f_alloc = p_comp*(1-f_used)*f_max. A zero allocation or a
    drained host drops the sub-task (and with it, the task)."""
    subtasks = split_task(task, action.p_task)
    placement = TaskPlacement(task=task, hosts=hosts, subtasks=subtasks)
    for k_idx, sub in enumerate(subtasks):
        host = hosts[k_idx]
        sub.assigned_sat = host
        if sub.size == 0:
            continue  # nothing to do; trivially complete
        avail_f = max(0.0, 1.0 - float(world.f_used[host]))
        avail_r = max(0.0, 1.0 - float(world.r_used[host]))
        f_frac = float(action.p_comp[k_idx]) * avail_f
        r_frac = float(action.p_comm[k_idx]) * avail_r
        if world.energy_j[host] <= 0.0 or f_frac <= 0.0 or r_frac <= 0.0:
            sub.dropped = True
            continue
        handle = world.allocate(host, f_frac, r_frac)
        placement.alloc_handles.append(handle)
        sub.f_alloc = f_frac * world.cfg.f_max_cycles
        sub.r_alloc = r_frac * world.cfg.r_max_bps
    return placement


def offload_round(
    world: Constellation,
    tasks: list[Task],
    routes: list[list[int]],
    policy,
    k: int,
    q_max: float,
    explore: bool = False,
) -> tuple[OffloadScheme, list[AgentState], list[AgentAction]]:
    """One decision round: states from the collected routes, one action per
    agent, commits applied in agent order."""
    hosts_per_agent = [route_hosts(r, k) for r in routes]
    states = build_states(world, hosts_per_agent, [t.size_q for t in tasks], q_max)
    actions = [policy.act(i, st, explore) for i, st in enumerate(states)]
    scheme = OffloadScheme()
    for i, task in enumerate(tasks):
        placement = commit_placement(world, task, hosts_per_agent[i], actions[i])
        placement.state = states[i]
        placement.action = actions[i]
        scheme.placements.append(placement)
    return scheme, states, actions

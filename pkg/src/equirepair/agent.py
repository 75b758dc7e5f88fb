"""Constrained soft actor-critic over the repair-sequencing CMDP.

The actor encodes the candidate action set with the permutation-equivariant
set encoder; each candidate's key (its embedding concatenated with the raw
token) is scored against a query built from the set summary and the
projected crew state through an additive tanh head, and the normalized
exponentials of the scores form the policy. Twin reward critics and twin
cost critics with Polyak-averaged targets are trained on replayed
transitions; a Lagrange multiplier prices the equity-cost constraint into
the actor objective and follows dual ascent on the critic cost estimate.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from ._io import read_json_block, write_json_block
from .nnet import (
    Adam,
    Dense,
    EncoderConfig,
    SetEncoder,
    Tensor,
    assign_params,
    cat,
    load_params,
    log_softmax,
    polyak_update,
    save_params,
    softmax,
    softmax_np,
)
from .simenv import EnvConfig, RepairEnv

STASAC_MAGIC = b"STASAC1\x00"

STATE_DIM = 4  # crew x, crew y, elapsed time, fraction repaired


class EmptyCandidatesError(ValueError):
    """The policy needs at least one candidate action."""


class InvalidDistributionError(ValueError):
    """Probabilities must be non-negative and sum to one."""


@dataclass(frozen=True)
class TrainingConfig:
    gamma: float = 1.0
    beta: float = 0.05
    lambda_init: float = 0.0
    eta_lambda: float = 0.01
    tau: float = 0.01
    lr_actor: float = 1e-3
    lr_critic: float = 3e-3
    episodes_per_cycle: int = 10
    updates_per_cycle: int = 4
    batch_size: int = 256
    replay_capacity: int = 100_000
    total_episodes: int = 1000
    d_limit: float | None = None  # falls back to the instance's bound
    seed: int = 0
    model_dim: int = 64
    n_heads: int = 4
    n_layers: int = 2
    feedforward_dim: int = 128
    attn_hidden: int = 64
    critic_hidden: int = 64
    scale_momentum: float = 0.99

    def validate(self) -> "TrainingConfig":
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.beta < 0 or self.eta_lambda < 0 or self.lambda_init < 0:
            raise ValueError("beta, eta_lambda and lambda_init must be >= 0")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must be in (0, 1]")
        if min(self.episodes_per_cycle, self.updates_per_cycle, self.batch_size) < 1:
            raise ValueError("cycle sizes must be >= 1")
        return self


class TokenLayout:
    """Instance-bound featurization of candidates and crew state.

    Token: [interval lo, hi, region x, y, elapsed, distance, group one-hot(3),
    region one-hot(N)]; times are normalized by an instance-derived horizon,
    distances by the instance extent.
    """

    # unbounded calibrated intervals (tiny calibration groups) saturate here
    FEATURE_CLIP = 10.0

    def __init__(self, env_cfg: EnvConfig):
        self.n = len(env_cfg.regions)
        coords = np.array([r.coord for r in env_cfg.regions] + [list(env_cfg.depot)])
        self.dist_scale = max(1.0, float(np.ptp(coords[:, 0])), float(np.ptp(coords[:, 1])))
        dur = math.nan
        if env_cfg.intervals:
            mids = [pi.midpoint for pi in env_cfg.intervals.values() if math.isfinite(pi.midpoint)]
            if mids:
                dur = float(np.mean(mids))
        if not math.isfinite(dur):
            dur = float(np.mean([np.mean(env_cfg.repair_samples[r.id]) for r in env_cfg.regions]))
        self.dur_scale = max(1.0, dur)
        self.time_scale = self.n * self.dur_scale
        self.token_dim = 9 + self.n

    def _clip(self, v: float) -> float:
        return float(np.clip(v, -self.FEATURE_CLIP, self.FEATURE_CLIP))

    def tokens(self, candidates) -> np.ndarray:
        if len(candidates) == 0:
            raise EmptyCandidatesError("candidate set must be nonempty")
        out = np.zeros((len(candidates), self.token_dim))
        for i, c in enumerate(candidates):
            out[i, 0] = self._clip(c.pi.lo / self.dur_scale)
            out[i, 1] = self._clip(c.pi.hi / self.dur_scale)
            out[i, 2] = c.coord[0] / self.dist_scale
            out[i, 3] = c.coord[1] / self.dist_scale
            out[i, 4] = c.elapsed / self.time_scale
            out[i, 5] = c.distance_km / self.dist_scale
            out[i, 6 + int(c.group)] = 1.0
            out[i, 9 + c.region_id] = 1.0
        return out

    def state_feats(self, state) -> np.ndarray:
        return np.array(
            [
                state.position[0] / self.dist_scale,
                state.position[1] / self.dist_scale,
                state.current_time / self.time_scale,
                state.n_repaired / self.n,
            ]
        )


class ActorNet:
    """Set encoder plus the additive score head (W_a, v_a)."""

    def __init__(self, layout: TokenLayout, cfg: TrainingConfig, seed: int):
        enc_cfg = EncoderConfig(
            input_dim=layout.token_dim,
            model_dim=cfg.model_dim,
            n_heads=cfg.n_heads,
            n_layers=cfg.n_layers,
            feedforward_dim=cfg.feedforward_dim,
        )
        seq = np.random.SeedSequence([seed, 11])
        rngs = [np.random.default_rng(s) for s in seq.spawn(3)]
        self.encoder = SetEncoder(enc_cfg, seed=seed)
        self.state_proj = Dense(STATE_DIM, cfg.model_dim, rngs[0])
        key_dim = cfg.model_dim + layout.token_dim
        query_dim = 2 * cfg.model_dim
        self.w_a = Dense(key_dim + query_dim, cfg.attn_hidden, rngs[1], bias=False)
        self.v_a = Dense(cfg.attn_hidden, 1, rngs[2], bias=False)

    def scores(self, state_feats: Tensor, tokens: Tensor, mask: np.ndarray | None):
        B, n, _ = tokens.data.shape
        cls, tok_emb = self.encoder.encode(tokens, mask)
        query = cat([cls, self.state_proj(state_feats)], axis=1)  # (B, 2d)
        query_rows = query.reshape(B, 1, -1) + Tensor(np.zeros((B, n, 1)))
        combined = cat([tok_emb, tokens, query_rows], axis=2)
        return self.v_a(self.w_a(combined).tanh()).reshape(B, n)

    def scores_np(self, state_feats: np.ndarray, tokens: np.ndarray, mask=None):
        B, n, _ = tokens.shape
        cls, tok_emb = self.encoder.encode_np(tokens, mask)
        query = np.concatenate([cls, self.state_proj.forward_np(state_feats)], axis=1)
        query_rows = np.broadcast_to(query[:, None, :], (B, n, query.shape[1]))
        combined = np.concatenate([tok_emb, tokens, query_rows], axis=2)
        h = np.tanh(self.w_a.forward_np(combined))
        return self.v_a.forward_np(h)[:, :, 0]

    def named_params(self):
        yield from self.encoder.named_params("actor.encoder")
        yield from self.state_proj.named_params("actor.state_proj")
        yield from self.w_a.named_params("actor.w_a")
        yield from self.v_a.named_params("actor.v_a")


class CriticNet:
    """MLP value head over (state features ++ chosen-action token)."""

    def __init__(self, in_dim: int, hidden: int, seed: int):
        seq = np.random.SeedSequence([seed, 22])
        rngs = [np.random.default_rng(s) for s in seq.spawn(3)]
        self.l1 = Dense(in_dim, hidden, rngs[0])
        self.l2 = Dense(hidden, hidden, rngs[1])
        self.l3 = Dense(hidden, 1, rngs[2])

    def __call__(self, x: Tensor) -> Tensor:
        return self.l3(self.l2(self.l1(x).tanh()).tanh()).reshape(x.data.shape[0])

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        h = np.tanh(self.l1.forward_np(x))
        h = np.tanh(self.l2.forward_np(h))
        return self.l3.forward_np(h)[:, 0]

    def named_params(self, prefix):
        yield from self.l1.named_params(f"{prefix}.l1")
        yield from self.l2.named_params(f"{prefix}.l2")
        yield from self.l3.named_params(f"{prefix}.l3")


def policy(actor: ActorNet, state_feats, tokens, mask=None) -> np.ndarray:
    """Candidate selection probabilities for one state (no gradient tape)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise EmptyCandidatesError(f"expected (n, token_dim) candidates, got {tokens.shape}")
    scores = actor.scores_np(np.asarray(state_feats)[None], tokens[None], mask)
    return softmax_np(scores)[0]


def select_action(probabilities, mode: str, rng=None) -> int:
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if probabilities.ndim != 1 or probabilities.size == 0:
        raise InvalidDistributionError("need a 1-D nonempty probability vector")
    if np.any(probabilities < -1e-12) or abs(probabilities.sum() - 1.0) > 1e-6:
        raise InvalidDistributionError(f"not a distribution: {probabilities}")
    if mode == "greedy":
        return int(np.argmax(probabilities))
    if mode == "sample":
        if rng is None:
            raise ValueError("sampling needs an rng")
        p = np.clip(probabilities, 0.0, None)
        return int(rng.choice(probabilities.size, p=p / p.sum()))
    raise ValueError(f"unknown mode {mode!r}")


def update_lambda(lam: float, eta: float, cost_estimate: float, d: float) -> float:
    """Dual ascent on the equity constraint: grow lambda while the critic
    cost estimate exceeds the bound, clamped at zero."""
    return max(0.0, lam + eta * (cost_estimate - d))


@dataclass
class Transition:
    state_feats: np.ndarray
    tokens: np.ndarray
    action_idx: int
    reward: float
    cost: float
    next_state_feats: np.ndarray | None
    next_tokens: np.ndarray | None
    done: bool


class ReplayStore:
    """FIFO transition buffer; sampling is uniform with replacement."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: list[Transition] = []
        self._cursor = 0

    def __len__(self):
        return len(self._items)

    def add(self, tr: Transition):
        if len(self._items) < self.capacity:
            self._items.append(tr)
        else:
            self._items[self._cursor] = tr
            self._cursor = (self._cursor + 1) % self.capacity

    def sample(self, batch_size: int, rng) -> list[Transition]:
        idx = rng.integers(0, len(self._items), size=batch_size)
        return [self._items[i] for i in idx]


def _pad(token_sets: list[np.ndarray], token_dim: int):
    n_max = max(t.shape[0] for t in token_sets)
    tokens = np.zeros((len(token_sets), n_max, token_dim))
    mask = np.zeros((len(token_sets), n_max), dtype=bool)
    for i, t in enumerate(token_sets):
        tokens[i, : t.shape[0]] = t
        mask[i, : t.shape[0]] = True
    return tokens, mask


class AttentionSacAgent:
    """Owns the networks, replay store and training state for one instance."""

    def __init__(self, env_cfg: EnvConfig, cfg: TrainingConfig):
        self.env_cfg = env_cfg
        self.cfg = cfg.validate()
        self.layout = TokenLayout(env_cfg)
        self.d = env_cfg.d_limit if cfg.d_limit is None else cfg.d_limit
        seed = cfg.seed
        self.actor = ActorNet(self.layout, cfg, seed)
        in_dim = STATE_DIM + self.layout.token_dim
        self.reward_critics = [CriticNet(in_dim, cfg.critic_hidden, seed + 101 + i) for i in range(2)]
        self.cost_critics = [CriticNet(in_dim, cfg.critic_hidden, seed + 201 + i) for i in range(2)]
        self.reward_targets = [CriticNet(in_dim, cfg.critic_hidden, seed + 101 + i) for i in range(2)]
        self.cost_targets = [CriticNet(in_dim, cfg.critic_hidden, seed + 201 + i) for i in range(2)]
        self.lam = cfg.lambda_init
        self.reward_scale = 1.0
        self.cost_scale = 1.0
        self._scales_primed = False
        self.replay = ReplayStore(cfg.replay_capacity)
        self.episodes_done = 0
        self._actor_opt = Adam(list(dict(self.actor.named_params()).values()), cfg.lr_actor)
        self._critic_opts = [
            Adam(list(dict(c.named_params("c")).values()), cfg.lr_critic)
            for c in self.reward_critics + self.cost_critics
        ]
        self._sample_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 9500]))

    # -- policies -------------------------------------------------------------

    def action_probs(self, state, candidates) -> np.ndarray:
        return policy(self.actor, self.layout.state_feats(state), self.layout.tokens(candidates))

    def greedy_policy(self):
        def run(state, candidates):
            return candidates[select_action(self.action_probs(state, candidates), "greedy")].region_id

        return run

    def sample_policy(self, rng):
        def run(state, candidates):
            probs = self.action_probs(state, candidates)
            return candidates[select_action(probs, "sample", rng)].region_id

        return run

    # -- collection -----------------------------------------------------------

    def collect_episode(self, env: RepairEnv, episode_idx: int):
        """One sampled-action episode pushed into the replay store."""
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 9000, episode_idx]))
        pending: list[Transition] = []

        def recorder(state, candidates):
            feats = self.layout.state_feats(state)
            tokens = self.layout.tokens(candidates)
            idx = select_action(policy(self.actor, feats, tokens), "sample", rng)
            if pending:
                prev = pending[-1]
                prev.next_state_feats = feats
                prev.next_tokens = tokens
            pending.append(Transition(feats, tokens, idx, 0.0, 0.0, None, None, False))
            return candidates[idx].region_id

        outcome = env.rollout(recorder, episode_seed=episode_idx)
        last = pending[-1]
        last.reward, last.cost, last.done = outcome.reward, outcome.cost, True
        for tr in pending:
            self.replay.add(tr)
        self._update_scales(outcome.reward, outcome.cost)
        self.episodes_done += 1
        return outcome

    def _update_scales(self, reward: float, cost: float):
        m = self.cfg.scale_momentum
        if not self._scales_primed:
            self.reward_scale = max(1.0, abs(reward))
            self.cost_scale = max(1.0, abs(cost))
            self._scales_primed = True
            return
        self.reward_scale = max(1.0, m * self.reward_scale + (1 - m) * abs(reward))
        self.cost_scale = max(1.0, m * self.cost_scale + (1 - m) * abs(cost))

    # -- updates ---------------------------------------------------------------

    def _critic_inputs(self, batch: list[Transition]) -> np.ndarray:
        rows = [np.concatenate([tr.state_feats, tr.tokens[tr.action_idx]]) for tr in batch]
        return np.stack(rows)

    def critic_targets(self, batch: list[Transition], rng) -> tuple[np.ndarray, np.ndarray]:
        """Per-transition regression targets: reward path bootstraps the twin
        target minimum with the entropy bonus of a freshly sampled next
        action; the cost path bootstraps without the entropy term."""
        B = len(batch)
        y_r = np.array([tr.reward / self.reward_scale for tr in batch])
        y_c = np.array([tr.cost / self.cost_scale for tr in batch])
        live = [i for i, tr in enumerate(batch) if not tr.done]
        if not live:
            return y_r, y_c
        token_sets = [batch[i].next_tokens for i in live]
        tokens, mask = _pad(token_sets, self.layout.token_dim)
        feats = np.stack([batch[i].next_state_feats for i in live])
        probs = softmax_np(self.actor.scores_np(feats, tokens, mask), mask=mask)
        n_valid = mask.sum(axis=1)
        choices = np.array(
            [rng.choice(tokens.shape[1], p=p / p.sum()) for p, _ in zip(probs, n_valid)]
        )
        logp = np.log(np.maximum(probs[np.arange(len(live)), choices], 1e-300))
        next_inputs = np.concatenate(
            [feats, tokens[np.arange(len(live)), choices]], axis=1
        )
        q_r = np.minimum(*(t.forward_np(next_inputs) for t in self.reward_targets))
        q_c = np.minimum(*(t.forward_np(next_inputs) for t in self.cost_targets))
        gamma = self.cfg.gamma
        y_r[live] += gamma * (q_r - self.cfg.beta * logp)
        y_c[live] += gamma * q_c
        return y_r, y_c

    @staticmethod
    def critic_loss_graph(critic: CriticNet, inputs: np.ndarray, targets: np.ndarray) -> Tensor:
        diff = critic(Tensor(inputs)) - Tensor(targets)
        return (diff * diff).mean()

    def update_critics(self, batch: list[Transition], y_r, y_c) -> tuple[float, float]:
        inputs = self._critic_inputs(batch)
        losses = []
        for critic, opt, target in zip(
            self.reward_critics + self.cost_critics,
            self._critic_opts,
            [y_r, y_r, y_c, y_c],
        ):
            opt.zero_grad()
            loss = self.critic_loss_graph(critic, inputs, target)
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        return float(np.mean(losses[:2])), float(np.mean(losses[2:]))

    def _q_tables(self, feats: np.ndarray, tokens: np.ndarray):
        """Q values for every candidate of every batch row, via numpy only."""
        B, n, f = tokens.shape
        rep = np.broadcast_to(feats[:, None, :], (B, n, feats.shape[1]))
        inputs = np.concatenate([rep, tokens], axis=2).reshape(B * n, -1)
        q_rc = [c.forward_np(inputs).reshape(B, n) for c in self.reward_critics]
        q_cc = [c.forward_np(inputs).reshape(B, n) for c in self.cost_critics]
        return q_rc, q_cc

    def actor_loss_graph(self, batch: list[Transition]) -> Tensor:
        """E_pi[beta log pi - min_j(Q_rj - lambda Q_cj)], exact expectation
        over each row's candidate set; critic values enter as constants so
        gradients reach only the actor parameters."""
        tokens, mask = _pad([tr.tokens for tr in batch], self.layout.token_dim)
        feats = np.stack([tr.state_feats for tr in batch])
        q_rc, q_cc = self._q_tables(feats, tokens)
        adv = np.minimum(
            q_rc[0] - self.lam * q_cc[0], q_rc[1] - self.lam * q_cc[1]
        )
        scores = self.actor.scores(Tensor(feats), Tensor(tokens), mask)
        probs = softmax(scores, mask=mask)
        logp = log_softmax(scores, mask=mask)
        summand = probs * (self.cfg.beta * logp - Tensor(adv)) * Tensor(mask.astype(float))
        return summand.sum(axis=1).mean()

    def update_actor(self, batch: list[Transition]) -> float:
        loss = self.actor_loss_graph(batch)
        self._actor_opt.zero_grad()
        loss.backward()
        self._actor_opt.step()
        return float(loss.data)

    def update_lambda_from_batch(self, batch: list[Transition]) -> float:
        inputs = self._critic_inputs(batch)
        q_c = np.minimum(*(c.forward_np(inputs) for c in self.cost_critics))
        cost_estimate = float(np.mean(q_c)) * self.cost_scale
        self.lam = update_lambda(self.lam, self.cfg.eta_lambda, cost_estimate, self.d)
        return cost_estimate

    def polyak_targets(self):
        for online, target in zip(
            self.reward_critics + self.cost_critics,
            self.reward_targets + self.cost_targets,
        ):
            polyak_update(
                [p for _, p in target.named_params("t")],
                [p for _, p in online.named_params("o")],
                self.cfg.tau,
            )

    def update_step(self):
        batch = self.replay.sample(self.cfg.batch_size, self._sample_rng)
        y_r, y_c = self.critic_targets(batch, self._sample_rng)
        loss_r, loss_c = self.update_critics(batch, y_r, y_c)
        actor_loss = self.update_actor(batch)
        self.update_lambda_from_batch(batch)
        self.polyak_targets()
        return actor_loss, loss_r, loss_c

    # -- training loop ----------------------------------------------------------

    def train(self, curves_path=None) -> list[dict]:
        env = RepairEnv(self.env_cfg)
        cycles = self.cfg.total_episodes // self.cfg.episodes_per_cycle
        curves = []
        for cycle in range(cycles):
            rewards, costs = [], []
            for _ in range(self.cfg.episodes_per_cycle):
                outcome = self.collect_episode(env, self.episodes_done)
                rewards.append(outcome.reward)
                costs.append(outcome.cost)
            actor_loss = loss_r = loss_c = math.nan
            for _ in range(self.cfg.updates_per_cycle):
                actor_loss, loss_r, loss_c = self.update_step()
            curves.append(
                {
                    "cycle": cycle,
                    "mean_reward": float(np.mean(rewards)),
                    "mean_cost": float(np.mean(costs)),
                    "lambda": self.lam,
                    "actor_loss": actor_loss,
                    "critic_loss_r": loss_r,
                    "critic_loss_c": loss_c,
                }
            )
        if curves_path is not None:
            write_curves(curves, curves_path)
        return curves

    # -- checkpointing ------------------------------------------------------------

    def _all_named_params(self) -> dict:
        named = dict(self.actor.named_params())
        for i, c in enumerate(self.reward_critics):
            named.update(dict(c.named_params(f"reward_critic{i}")))
        for i, c in enumerate(self.cost_critics):
            named.update(dict(c.named_params(f"cost_critic{i}")))
        for i, c in enumerate(self.reward_targets):
            named.update(dict(c.named_params(f"reward_target{i}")))
        for i, c in enumerate(self.cost_targets):
            named.update(dict(c.named_params(f"cost_target{i}")))
        return named

    def save(self, path) -> None:
        header = {
            "train_cfg": asdict(self.cfg),
            "lambda": self.lam,
            "reward_scale": self.reward_scale,
            "cost_scale": self.cost_scale,
            "scales_primed": self._scales_primed,
            "episodes_done": self.episodes_done,
            "n_regions": self.layout.n,
            "token_dim": self.layout.token_dim,
        }
        with open(path, "wb") as f:
            write_json_block(f, STASAC_MAGIC, header)
            save_params(f, self._all_named_params())

    @classmethod
    def load(cls, path, env_cfg: EnvConfig) -> "AttentionSacAgent":
        with open(path, "rb") as f:
            header = read_json_block(f, STASAC_MAGIC)
            arrays = load_params(f)
        cfg = TrainingConfig(**header["train_cfg"])
        agent = cls(env_cfg, cfg)
        if agent.layout.token_dim != header["token_dim"]:
            raise ValueError(
                f"checkpoint was trained on a {header['n_regions']}-region instance, "
                f"got {agent.layout.n} regions"
            )
        assign_params(agent._all_named_params(), arrays)
        agent.lam = header["lambda"]
        agent.reward_scale = header["reward_scale"]
        agent.cost_scale = header["cost_scale"]
        agent._scales_primed = header["scales_primed"]
        agent.episodes_done = header["episodes_done"]
        return agent


def write_curves(curves: list[dict], path) -> None:
    cols = ["cycle", "mean_reward", "mean_cost", "lambda", "actor_loss", "critic_loss_r", "critic_loss_c"]
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(cols) + "\n")
        for row in curves:
            f.write(",".join(repr(row[c]) for c in cols) + "\n")


def train(env_cfg: EnvConfig, train_cfg: TrainingConfig, intervals=None, curves_path=None):
    """Train a fresh agent; intervals (region_id -> PredictionInterval) come
    from the calibrated predictor and override any attached to env_cfg."""
    if intervals is not None:
        env_cfg = replace(env_cfg, intervals=intervals)
    agent = AttentionSacAgent(env_cfg, train_cfg)
    curves = agent.train(curves_path=curves_path)
    return agent, curves

"""Token-level softmax policy with an analytic log-prob gradient.

The policy is ``pi(.|ctx) = softmax(W phi(ctx))`` where ``phi`` averages
one-hot vectors of the last few context tokens folded into ``D`` buckets.
It is small enough for finite-difference checks but still produces
non-trivial gradients, which is all the training engine needs.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

EOS = 0
WINDOW = 4


def keyed_rng(seed: int, *parts: object) -> np.random.Generator:
    """Independent stream for a (seed, key...) tuple, stable across runs."""
    words = [int(seed) & 0xFFFFFFFF]
    words += [zlib.crc32(str(p).encode("utf-8")) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(words))


def features(context: Sequence[int], dim: int) -> np.ndarray:
    phi = np.zeros(dim)
    tail = list(context)[-WINDOW:]
    if not tail:
        return phi
    for tok in tail:
        phi[int(tok) % dim] += 1.0
    return phi / len(tail)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def init_weights(vocab: int, dim: int, seed: int, agent_id: str, scale: float = 0.1) -> np.ndarray:
    return keyed_rng(seed, "init", agent_id).normal(0.0, scale, size=(vocab, dim))


@dataclass
class Generation:
    tokens: list[int]
    logprobs: list[float]


@dataclass
class PolicyModel:
    W: np.ndarray

    @property
    def vocab(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    def probs(self, context: Sequence[int]) -> np.ndarray:
        return softmax(self.W @ features(context, self.dim))

    def contexts(self, prompt: Sequence[int], response: Sequence[int]) -> np.ndarray:
        """Feature matrix, one row per response position."""
        ctx = list(prompt)
        rows = np.empty((len(response), self.dim))
        for t, tok in enumerate(response):
            rows[t] = features(ctx, self.dim)
            ctx.append(tok)
        return rows

    def log_probs(self, prompt: Sequence[int], response: Sequence[int]) -> np.ndarray:
        if len(response) == 0:
            return np.zeros(0)
        phi = self.contexts(prompt, response)
        z = phi @ self.W.T
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return logp[np.arange(len(response)), np.asarray(response, dtype=int)]

    def sequence_grad(self, prompt: Sequence[int], response: Sequence[int]) -> np.ndarray:
        """d/dW of sum_t log pi(a_t | s_t) = sum_t (e_a - pi) phi^T."""
        if len(response) == 0:
            return np.zeros_like(self.W)
        phi = self.contexts(prompt, response)
        p = softmax(phi @ self.W.T)
        p[np.arange(len(response)), np.asarray(response, dtype=int)] -= 1.0
        return -(p.T @ phi)

    def generate(
        self,
        prompt: Sequence[int],
        rng: np.random.Generator,
        max_tokens: int,
        greedy: bool = False,
    ) -> Generation:
        ctx = list(prompt)
        tokens: list[int] = []
        logprobs: list[float] = []
        while len(tokens) < max_tokens:
            p = self.probs(ctx)
            tok = int(np.argmax(p)) if greedy else int(rng.choice(self.vocab, p=p))
            tokens.append(tok)
            logprobs.append(float(np.log(p[tok])))
            ctx.append(tok)
            if tok == EOS:
                break
        return Generation(tokens, logprobs)


# ---------------------------------------------------------------------------
# GRPO pieces
# ---------------------------------------------------------------------------

ADV_EPS = 1e-8


def group_advantages(rewards: Sequence[float], eps: float = ADV_EPS) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        return r
    return (r - r.mean()) / (r.std() + eps)


def sample_grad(
    model: PolicyModel, prompt: Sequence[int], response: Sequence[int], advantage: float, global_batch: int
) -> np.ndarray:
    """One sample's contribution to dL/dW with L = -(1/B) sum_i A_i sum_t log pi."""
    return -(advantage / global_batch) * model.sequence_grad(prompt, response)


def surrogate_loss(
    W: np.ndarray,
    samples: Iterable[tuple[Sequence[int], Sequence[int], float]],
    global_batch: int,
) -> float:
    model = PolicyModel(W)
    total = 0.0
    for prompt, response, adv in samples:
        total += adv * float(model.log_probs(prompt, response).sum())
    return -total / global_batch


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, W: np.ndarray, lr: float = 1e-6) -> AdamState:
        return cls(np.zeros_like(W), np.zeros_like(W), lr=lr)

    def apply(self, W: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.step += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.step)
        v_hat = self.v / (1 - self.beta2**self.step)
        return W - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Rule-based reward
# ---------------------------------------------------------------------------


def pattern_score(response: Sequence[int], target: Sequence[int]) -> float:
    """Fraction of ``target`` matched, in order, as a subsequence of ``response``."""
    if not target or not response:
        return 0.0
    i = 0
    for tok in response:
        if tok == target[i]:
            i += 1
            if i == len(target):
                break
    return i / len(target)


def compute_reward(responses: Sequence[Sequence[int]], target: Sequence[int]) -> float:
    """Mean pattern score over the terminal responses of a trajectory."""
    if not responses:
        return 0.0
    return float(sum(pattern_score(r, target) for r in responses) / len(responses))

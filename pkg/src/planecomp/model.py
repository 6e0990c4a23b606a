"""The completion pipeline: hierarchical encoding into plane proxies, query
generation and ranking, cross-attention decoding, and the three prediction
heads (plane parameters, per-plane point angles, confidence).

Point patches are embedded with a shared per-point MLP and max-pooled, then
pooled per planar segment (sum pooling plus a normal embedding) into plane
proxies.  Queries from the input proxies and from a global feature are ranked
by a learned score; the top M are refined against the proxies by single-head
cross-attention.  Every predicted inlier point is materialized through the
on-plane radius formula, so it lies on its predicted plane by construction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffkit as dk
from .diffkit import ParamStore, Tensor
from .geom import EPS_DENOM, PlanePrimitive, PolarPlane
from .matchloss import StackedPredictions
from .pointops import farthest_point_sample, knn_indices
from .segment import Segmentation


@dataclass
class ModelConfig:
    feature_dim: int = 64          # F
    input_size: int = 2048
    n_point_proxies: int = 128
    patch_k: int = 32
    n_plane_slots: int = 20        # K, padded input plane proxies
    n_queries: int = 40            # M, refined proxies kept after ranking
    n_generated: int = 40          # K', queries proposed from the global feature
    points_per_primitive: int = 128  # T
    encoder_depth: int = 2
    decoder_depth: int = 2
    ffn_mult: int = 2
    tau: float = 0.5
    seed: int = 0

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Small enough to finite-difference through the whole pipeline."""
        return cls(feature_dim=8, input_size=128, n_point_proxies=16, patch_k=8,
                   n_plane_slots=4, n_queries=4, n_generated=4, points_per_primitive=8,
                   encoder_depth=1, decoder_depth=1, ffn_mult=2)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), sort_keys=True, indent=2) + "\n")

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class ModelOutput:
    """Forward-pass results with live graph tensors plus numpy conveniences."""

    r: Tensor       # (M,)
    theta: Tensor   # (M,)
    phi: Tensor     # (M,)
    points: Tensor  # (M*T, 3), T consecutive rows per primitive
    normals: Tensor  # (M, 3)
    kappa: Tensor   # (M,)
    n_queries: int
    points_per_primitive: int
    decoder_attention: list[np.ndarray]

    def prediction_set(self) -> StackedPredictions:
        return StackedPredictions(
            points_stack=self.points, kappa_stack=self.kappa, normal_stack=self.normals,
            m=self.n_queries, t=self.points_per_primitive,
        )

    def planes(self) -> list[PolarPlane]:
        phi_max = np.nextafter(np.pi, -np.inf)
        return [
            PolarPlane(float(r), float(np.clip(t, 0.0, np.pi)), float(np.clip(p, -np.pi, phi_max)))
            for r, t, p in zip(self.r.values, self.theta.values, self.phi.values)
        ]

    def primitives(self, tau: float = 0.5) -> list[PlanePrimitive]:
        """Confidence-selected primitives with materialized inlier points."""
        m, t = self.n_queries, self.points_per_primitive
        pts = self.points.values.reshape(m, t, 3)
        out = []
        for j, plane in enumerate(self.planes()):
            conf = float(self.kappa.values[j])
            if conf >= tau:
                out.append(PlanePrimitive(plane=plane, points=pts[j].copy(), confidence=conf))
        return out

    def all_primitives(self) -> list[PlanePrimitive]:
        m, t = self.n_queries, self.points_per_primitive
        pts = self.points.values.reshape(m, t, 3)
        return [
            PlanePrimitive(plane=plane, points=pts[j].copy(), confidence=float(self.kappa.values[j]))
            for j, plane in enumerate(self.planes())
        ]


class CompletionModel:
    """Trainable set-prediction model over a diffkit parameter store."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.store = ParamStore()
        self._rng = np.random.default_rng(np.random.SeedSequence([0xA0DE1, config.seed]))
        f = config.feature_dim
        self._linear("patch.embed0", 6, f)
        self._linear("patch.embed1", f, f)
        self._linear("patch.pos", 3, f)
        for d in range(config.encoder_depth):
            self._attn_block(f"enc{d}", f)
        self.store.create("enc_final.gamma", np.ones(f))
        self.store.create("enc_final.beta", np.zeros(f))
        self._linear("plane.normal_embed0", 3, f)
        self._linear("plane.normal_embed1", f, f)
        self._linear("query.from_input", f, f)
        self._linear("query.global", f, config.n_generated * f)
        self._linear("query.score", f, 1)
        for d in range(config.decoder_depth):
            self._attn_block(f"dec{d}", f)
        self.store.create("dec_final.gamma", np.ones(f))
        self.store.create("dec_final.beta", np.zeros(f))
        self._linear("head.params", f, 3)
        self._linear("head.theta", f, config.points_per_primitive)
        self._linear("head.phi", f, config.points_per_primitive)
        self._linear("head.confidence", f, 1)

    # parameter helpers -----------------------------------------------------

    def _linear(self, name: str, fan_in: int, fan_out: int) -> None:
        w = self._rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        self.store.create(f"{name}.w", w)
        self.store.create(f"{name}.b", np.zeros(fan_out))

    def _attn_block(self, name: str, f: int) -> None:
        for part in ("wq", "wk", "wv", "wo"):
            self._linear(f"{name}.attn.{part}", f, f)
        self._linear(f"{name}.ffn.0", f, self.config.ffn_mult * f)
        self._linear(f"{name}.ffn.1", self.config.ffn_mult * f, f)
        for ln in ("ln1", "ln2", "ln_kv"):
            self.store.create(f"{name}.{ln}.gamma", np.ones(f))
            self.store.create(f"{name}.{ln}.beta", np.zeros(f))

    def _apply_linear(self, name: str, x: Tensor) -> Tensor:
        return dk.add_bias(dk.matmul(x, self.store[f"{name}.w"]), self.store[f"{name}.b"])

    def _apply_ln(self, name: str, x: Tensor) -> Tensor:
        return dk.scale_shift(dk.normalize_rows(x), self.store[f"{name}.gamma"], self.store[f"{name}.beta"])

    def _attention(self, name: str, q: Tensor, kv: Tensor) -> tuple[Tensor, np.ndarray]:
        f = self.config.feature_dim
        qq = self._apply_linear(f"{name}.attn.wq", q)
        kk = self._apply_linear(f"{name}.attn.wk", kv)
        vv = self._apply_linear(f"{name}.attn.wv", kv)
        logits = dk.mul(dk.matmul(qq, dk.transpose(kk)), 1.0 / np.sqrt(f))
        attn = dk.softmax(logits, axis=-1)
        out = self._apply_linear(f"{name}.attn.wo", dk.matmul(attn, vv))
        return out, attn.values

    def _block(self, name: str, x: Tensor, kv: Tensor | None = None) -> tuple[Tensor, np.ndarray]:
        src = x if kv is None else kv
        normed_kv = self._apply_ln(f"{name}.ln_kv", src)
        attn_out, weights = self._attention(name, self._apply_ln(f"{name}.ln1", x), normed_kv)
        x = dk.add(x, attn_out)
        h = self._apply_linear(f"{name}.ffn.1", dk.relu(
            self._apply_linear(f"{name}.ffn.0", self._apply_ln(f"{name}.ln2", x))))
        return dk.add(x, h), weights

    # pipeline stages --------------------------------------------------------

    def encode_point_proxies(self, points: np.ndarray) -> tuple[np.ndarray, Tensor]:
        """(center indices, per-patch features): FPS centers, k-NN patches,
        shared per-point MLP, max-pool, then self-attention blocks."""
        cfg = self.config
        pts = np.asarray(points, dtype=np.float64)
        if pts.shape != (cfg.input_size, 3):
            raise ValueError(f"expected ({cfg.input_size}, 3) input cloud, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise dk.NonFinite("input cloud contains non-finite points")
        centers = farthest_point_sample(pts, cfg.n_point_proxies)
        nbrs = knn_indices(pts, pts[centers], cfg.patch_k)
        local = pts[nbrs] - pts[centers][:, None, :]
        per_point = np.concatenate([local, pts[nbrs]], axis=-1)  # (P, k, 6)
        p, k = cfg.n_point_proxies, cfg.patch_k
        h = Tensor(per_point.reshape(p * k, 6))
        h = dk.relu(self._apply_linear("patch.embed0", h))
        h = self._apply_linear("patch.embed1", h)
        feats = dk.max_reduce(dk.reshape(h, (p, k, cfg.feature_dim)), axis=1)
        feats = dk.add(feats, self._apply_linear("patch.pos", Tensor(pts[centers])))
        for d in range(cfg.encoder_depth):
            feats, _ = self._block(f"enc{d}", feats)
        return centers, self._apply_ln("enc_final", feats)

    def build_plane_proxies(self, centers: np.ndarray, feats: Tensor,
                            seg: Segmentation) -> tuple[Tensor, np.ndarray]:
        """Pool point-proxy features per planar segment (sum pooling plus a
        normal embedding); unassigned centers pool into a null slot with zero
        normal embedding; pad with zero features to K slots, keeping the
        largest slots by support on overflow.

        Returns (V, slot_normals); padded slots carry a zero normal.
        """
        cfg = self.config
        labels = seg.labels()[centers]  # segment id per center, -1 if unassigned
        n_seg = len(seg.segments)
        support = np.bincount(labels[labels >= 0], minlength=n_seg)
        has_null = bool(np.any(labels < 0))
        slots = [(int(s), i) for i, s in enumerate(support)]  # (support, segment)
        if has_null:
            slots.append((int(np.sum(labels < 0)), n_seg))  # null bucket last
        if len(slots) > cfg.n_plane_slots:
            order = sorted(range(len(slots)), key=lambda i: (-slots[i][0], i))
            keep = sorted(order[: cfg.n_plane_slots])
            slots = [slots[i] for i in keep]
        slot_of = {seg_id: si for si, (_, seg_id) in enumerate(slots)}

        ids = np.array([
            slot_of.get(int(l) if l >= 0 else n_seg, len(slots))
            for l in labels
        ])
        # the extra bucket absorbs centers whose segment lost the support cut
        sums = dk.gather(dk.group_sum(feats, ids, len(slots) + 1), np.arange(len(slots)))
        if len(slots) < cfg.n_plane_slots:
            pad = Tensor(np.zeros((cfg.n_plane_slots - len(slots), cfg.feature_dim)))
            pooled = dk.concat([sums, pad], axis=0)
        else:
            pooled = sums

        slot_normals = np.zeros((cfg.n_plane_slots, 3))
        mask = np.zeros((cfg.n_plane_slots, cfg.feature_dim))
        for si, (_, seg_id) in enumerate(slots):
            if si >= cfg.n_plane_slots:
                break
            if seg_id < n_seg:
                slot_normals[si] = seg.segments[seg_id].plane.normal
                mask[si] = 1.0
        phi = self._apply_linear("plane.normal_embed1",
                                 dk.relu(self._apply_linear("plane.normal_embed0", Tensor(slot_normals))))
        v = dk.add(pooled, dk.mul(phi, Tensor(mask)))
        return v, slot_normals

    def generate_queries(self, v: Tensor) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Rank input-derived and globally-generated queries; keep the top M.

        Returns (queries, scores over all candidates, selected indices).
        Selection is exact top-M by score, ties to the lower index.
        """
        cfg = self.config
        q_input = self._apply_linear("query.from_input", v)
        pooled = dk.reshape(dk.max_reduce(v, axis=0), (1, cfg.feature_dim))
        q_gen = dk.reshape(self._apply_linear("query.global", pooled),
                           (cfg.n_generated, cfg.feature_dim))
        candidates = dk.concat([q_input, q_gen], axis=0)
        scores = dk.sigmoid(dk.reshape(self._apply_linear("query.score", candidates), (-1,)))
        svals = scores.values
        order = np.argsort(-svals, kind="stable")  # descending, ties to lower index
        selected = order[: cfg.n_queries]
        return dk.gather(candidates, selected), svals, selected

    def decode_proxies(self, v: Tensor, q: Tensor) -> tuple[Tensor, list[np.ndarray]]:
        attn_maps = []
        for d in range(self.config.decoder_depth):
            q, weights = self._block(f"dec{d}", q, kv=v)
            attn_maps.append(weights)
        return self._apply_ln("dec_final", q), attn_maps

    def estimate_parameters(self, h: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Per proxy: r = softplus(a) >= 0, theta = pi*sigmoid(b), phi = pi*tanh(c)."""
        raw_t = dk.transpose(self._apply_linear("head.params", h))  # (3, M)
        m = h.values.shape[0]
        r = dk.softplus(dk.reshape(dk.gather(raw_t, [0]), (m,)))
        theta = dk.mul(dk.sigmoid(dk.reshape(dk.gather(raw_t, [1]), (m,))), np.pi)
        phi = dk.mul(dk.tanh(dk.reshape(dk.gather(raw_t, [2]), (m,))), np.pi)
        return r, theta, phi

    def distribute_points(self, h: Tensor, r: Tensor, theta: Tensor,
                          phi: Tensor) -> Tensor:
        """T on-plane points per primitive from predicted ray angles.

        The radius follows from the angles and plane parameters; rays nearly
        parallel to their plane (|denominator| < EPS_DENOM) are reflected to
        the plane's own angles, i.e. the plane foot point.
        """
        cfg = self.config
        t_count = cfg.points_per_primitive
        m = h.values.shape[0]
        zeros_t = Tensor(np.zeros(t_count))
        th_i = dk.outer_add(theta, zeros_t)  # (M, T) tiled plane angles
        ph_i = dk.outer_add(phi, zeros_t)
        r_i = dk.outer_add(r, zeros_t)
        th_ij = dk.mul(dk.sigmoid(self._apply_linear("head.theta", h)), np.pi)
        ph_ij = dk.mul(dk.tanh(self._apply_linear("head.phi", h)), np.pi)

        def denom(t_ang, p_ang):
            return dk.add(
                dk.mul(dk.mul(dk.cos(dk.sub(p_ang, ph_i)), dk.sin(t_ang)), dk.sin(th_i)),
                dk.mul(dk.cos(t_ang), dk.cos(th_i)),
            )

        d_raw = denom(th_ij, ph_ij)
        fallback = (np.abs(d_raw.values) < EPS_DENOM).astype(np.float64)
        if fallback.any():
            keep = Tensor(1.0 - fallback)
            swap = Tensor(fallback)
            th_eff = dk.add(dk.mul(th_ij, keep), dk.mul(th_i, swap))
            ph_eff = dk.add(dk.mul(ph_ij, keep), dk.mul(ph_i, swap))
            d_eff = denom(th_eff, ph_eff)
        else:
            th_eff, ph_eff, d_eff = th_ij, ph_ij, d_raw
        r_ij = dk.div(r_i, d_eff)
        st = dk.sin(th_eff)
        px = dk.mul(r_ij, dk.mul(st, dk.cos(ph_eff)))
        py = dk.mul(r_ij, dk.mul(st, dk.sin(ph_eff)))
        pz = dk.mul(r_ij, dk.cos(th_eff))
        flat = [dk.reshape(c, (m * t_count, 1)) for c in (px, py, pz)]
        return dk.concat(flat, axis=1)

    def select_confidences(self, h: Tensor) -> Tensor:
        m = h.values.shape[0]
        return dk.sigmoid(dk.reshape(self._apply_linear("head.confidence", h), (m,)))

    def _plane_normals(self, theta: Tensor, phi: Tensor) -> Tensor:
        m = theta.values.shape[0]
        st = dk.sin(theta)
        cols = [dk.mul(st, dk.cos(phi)), dk.mul(st, dk.sin(phi)), dk.cos(theta)]
        return dk.concat([dk.reshape(c, (m, 1)) for c in cols], axis=1)

    def forward(self, points: np.ndarray, seg: Segmentation) -> ModelOutput:
        centers, feats = self.encode_point_proxies(points)
        v, _ = self.build_plane_proxies(centers, feats, seg)
        q, _, _ = self.generate_queries(v)
        h, attn = self.decode_proxies(v, q)
        r, theta, phi = self.estimate_parameters(h)
        pts = self.distribute_points(h, r, theta, phi)
        kappa = self.select_confidences(h)
        return ModelOutput(
            r=r, theta=theta, phi=phi, points=pts,
            normals=self._plane_normals(theta, phi), kappa=kappa,
            n_queries=self.config.n_queries,
            points_per_primitive=self.config.points_per_primitive,
            decoder_attention=attn,
        )

    # persistence -------------------------------------------------------------

    def save_weights(self, path) -> None:
        self.store.save(path)

    def load_weights(self, path) -> None:
        self.store.load(path)

"""The assembled moment-retrieval model: encoders, fusion, MR/evidential/QR heads."""

from dataclasses import dataclass

import numpy as np

from evimr import fusion, nn
from evimr.evidential import constrain_batch, softplus, uncertainties_batch
from evimr.heads import Targets, batch_objective, clip_centers, decode_predictions


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int = 16
    width: int = 16
    vocab_size: int = 64
    n_rff: int = 4
    fusion: str = "rff"  # or "concat"
    residual: bool = True
    concat_hidden: int = 32
    offset_scale: float = 0.25

    def __post_init__(self):
        if self.fusion not in ("rff", "concat"):
            raise ValueError(f"fusion must be 'rff' or 'concat', got {self.fusion!r}")
        if self.n_rff < 1 or self.width < 1 or self.feat_dim < 1 or self.vocab_size < 2:
            raise ValueError("model dimensions must be positive")


EVIDENTIAL_PARAMS = ("evid.w", "evid.b")
QR_PARAMS = ("qr.w", "qr.b")


class MomentModel:
    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        self.store = s = nn.ParamStore(seed)
        s.add("video_in.w", (cfg.feat_dim, cfg.width))
        s.add("video_in.b", (cfg.width,), init="zeros")
        s.add("tok_emb", (cfg.vocab_size, cfg.width))
        if cfg.fusion == "rff":
            fusion.add_rff_params(s, cfg.n_rff, cfg.width)
        else:
            fusion.add_concat_params(s, cfg.width, cfg.concat_hidden)
        s.add("mr.fg.w", (cfg.width, 1))
        s.add("mr.fg.b", (1,), init="zeros")
        s.add("mr.off.w", (cfg.width, 2))
        s.add("mr.off.b", (2,), init="zeros")
        s.add("evid.w", (cfg.width, 8))
        s.add("evid.b", (8,), init="zeros")
        s.add("qr.w", (cfg.width, cfg.vocab_size))
        s.add("qr.b", (cfg.vocab_size,), init="zeros")

    # ------------------------------------------------------------ forward

    def forward(self, video, tokens, frozen_features=None):
        s = self.store
        video = np.asarray(video, dtype=np.float64)
        tokens = np.asarray(tokens)
        if video.shape[-1] != self.cfg.feat_dim:
            raise nn.ShapeError(f"video features have width {video.shape[-1]}, model expects {self.cfg.feat_dim}")
        v0, c_in = nn.affine_forward(video, s["video_in.w"], s["video_in.b"])
        t0, c_emb = nn.embedding_forward(tokens, s["tok_emb"])
        if self.cfg.fusion == "rff":
            state, c_fuse = fusion.rff_stack(s, v0, t0, self.cfg.n_rff, self.cfg.residual)
            fv, ft = state.video, state.text
        else:
            fv, c_fuse = fusion.concat_fusion(s, v0, t0)
            ft = t0
        return self._heads(fv, ft, frozen_features, (c_in, c_emb, c_fuse))

    def _heads(self, fv, ft, frozen_features, enc_cache):
        s = self.store
        fg, c_fg = nn.affine_forward(fv, s["mr.fg.w"], s["mr.fg.b"])
        off_pre, c_off = nn.affine_forward(fv, s["mr.off.w"], s["mr.off.b"])
        raw_ev, c_ev = nn.affine_forward(fv, s["evid.w"], s["evid.b"])
        reg_feat = fv if frozen_features is None else frozen_features
        raw_ev_reg = raw_ev if frozen_features is None else reg_feat @ s["evid.w"] + s["evid.b"]
        qr_logits, c_qr = nn.affine_forward(ft, s["qr.w"], s["qr.b"])
        out = {
            "fused_video": fv,
            "fused_text": ft,
            "fg_logit": fg[..., 0],
            "off_pre": off_pre,
            "offset_scale": self.cfg.offset_scale,
            "offsets": self.cfg.offset_scale * softplus(off_pre),
            "raw_ev": raw_ev,
            "raw_ev_reg": raw_ev_reg,
            "qr_logits": qr_logits,
        }
        cache = (enc_cache, c_fg, c_off, c_ev, c_qr, reg_feat)
        return out, cache

    # ------------------------------------------------------------ backward

    def backward(self, grads, cache):
        """Accumulate parameter gradients given d(loss)/d(raw head outputs)."""
        s = self.store
        (c_in, c_emb, c_fuse), c_fg, c_off, c_ev, c_qr, reg_feat = cache
        dfv, dW, db = nn.affine_backward(grads["fg_logit"][..., None], c_fg)
        s.accumulate("mr.fg.w", dW)
        s.accumulate("mr.fg.b", db)
        d, dW, db = nn.affine_backward(grads["off_pre"], c_off)
        dfv = dfv + d
        s.accumulate("mr.off.w", dW)
        s.accumulate("mr.off.b", db)
        d, dW, db = nn.affine_backward(grads["raw_ev"], c_ev)
        dfv = dfv + d
        s.accumulate("evid.w", dW)
        s.accumulate("evid.b", db)
        # regularizer path: reaches the evidential head only
        g_reg = grads["raw_ev_reg"]
        s.accumulate("evid.w", nn._sum_leading(np.swapaxes(reg_feat, -1, -2) @ g_reg, 2))
        s.accumulate("evid.b", g_reg.reshape(-1, g_reg.shape[-1]).sum(axis=0))
        dft = np.zeros(c_qr[0].shape)
        if grads.get("qr_logits") is not None:
            dft, dW, db = nn.affine_backward(grads["qr_logits"], c_qr)
            s.accumulate("qr.w", dW)
            s.accumulate("qr.b", db)
        if self.cfg.fusion == "rff":
            dv0, dt0 = fusion.rff_stack_backward(s, dfv, dft, c_fuse)
        else:
            dv0, dt_mean = fusion.concat_fusion_backward(s, dfv, c_fuse)
            dt0 = dt_mean + dft
        s.accumulate("tok_emb", nn.embedding_backward(dt0, c_emb))
        _, dW, db = nn.affine_backward(dv0, c_in)
        s.accumulate("video_in.w", dW)
        s.accumulate("video_in.b", db)

    # ------------------------------------------------------------ training helpers

    def loss_and_grad(self, video, tokens, targets: Targets, weights, mode, qr_active=False):
        out, cache = self.forward(video, tokens)
        parts, grads, frozen = batch_objective(out, targets, weights, mode, qr_active)
        if not qr_active:
            grads["qr_logits"] = None
        self.backward(grads, cache)
        return parts, out, frozen

    def frozen_loss(self, video, tokens, targets, weights, mode, qr_active, frozen_features, frozen):
        """Loss with stop-gradient quantities held at supplied values (finite-difference oracle)."""
        out, _ = self.forward(video, tokens, frozen_features=frozen_features)
        parts, _, _ = batch_objective(out, targets, weights, mode, qr_active, frozen=frozen)
        return parts["total"]

    # ------------------------------------------------------------ inference

    def predict(self, video, tokens):
        """Per-clip outputs for a batch: scores, decoded spans and NIG uncertainties."""
        out, _ = self.forward(video, tokens)
        L = out["fg_logit"].shape[-1]
        c = clip_centers(L)
        off = out["offsets"]
        starts = np.maximum(c - off[..., 0], 0.0)
        ends = np.minimum(c + off[..., 1], 1.0)
        (g, u, a, be), _ = constrain_batch(out["raw_ev"].reshape(*out["raw_ev"].shape[:-1], 2, 4))
        alea, epi = uncertainties_batch(u, a, be)
        return {
            "fg_logit": out["fg_logit"],
            "starts": starts,
            "ends": ends,
            "gamma": g,  # (..., L, 2) start/end
            "upsilon": u,
            "alpha": a,
            "beta": be,
            "aleatoric": alea,
            "epistemic": epi,
            "raw": out,
        }

    def mr_head_forward(self, fused_video):
        """Decode one video's fused features (L, D) into ``ClipPrediction`` objects."""
        s = self.store
        fused_video = nn.as_tensor2d(fused_video, "fused_video")
        fg = fused_video @ s["mr.fg.w"] + s["mr.fg.b"]
        off = self.cfg.offset_scale * softplus(fused_video @ s["mr.off.w"] + s["mr.off.b"])
        raw_ev = fused_video @ s["evid.w"] + s["evid.b"]
        return decode_predictions(fg[:, 0], off, raw_ev)

"""Masked autoencoder over network-pair connectivity patches.

Pretraining pipeline per subject: tokenize all patches, prepend the CLS
token, add encoder positional embeddings, drop the masked tokens, run the
encoder on CLS + visible tokens, project to decoder width, insert the
mask token at every masked position (positions keep their original
order), add decoder positional embeddings, run the decoder, decode the
masked positions back to blocks, and score them with the reconstruction
loss: mean over masked patches of the squared Frobenius distance.
"""

from __future__ import annotations

import io as _io
import struct
import zlib
from dataclasses import dataclass, fields

import numpy as np

from . import nn
from .errors import DataError
from .fc import Parcellation, Patch, build_layout, extract_patches
from .tokenizers import (
    TOKENIZER_KINDS,
    _check_patches,
    init_detokenizer,
    init_tokenizer,
)

CKPT_MAGIC = b"NERVECKPT1"
CKPT_VERSION = 1


@dataclass(frozen=True)
class MAEConfig:
    """Architecture and training hyperparameters.

    Defaults are the desk-scale configuration; configs/paper_scale.ini
    carries the full-scale settings.
    """

    tokenizer: str = "bilinear"
    d_e: int = 32
    enc_depth: int = 2
    enc_heads: int = 2
    d_d: int = 16
    dec_depth: int = 1
    dec_heads: int = 2
    mask_ratio: float = 0.5
    epochs: int = 300
    warmup_epochs: int = 30
    base_lr: float = 1e-2
    weight_decay: float = 1e-2
    batch_size: int = 64
    seed: int = 0
    loss_norm: str = "patch"
    schedule_per_step: bool = False

    def __post_init__(self):
        if self.tokenizer not in TOKENIZER_KINDS:
            raise DataError(f"unknown tokenizer kind: {self.tokenizer!r}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise DataError("mask_ratio must be in (0, 1)")
        if self.d_e % self.enc_heads != 0 or self.d_d % self.dec_heads != 0:
            raise DataError("head counts must divide model widths")
        if min(self.enc_depth, self.dec_depth) < 1:
            raise DataError("encoder/decoder depths must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise DataError("require 0 <= warmup_epochs < epochs")
        if self.loss_norm not in ("patch", "entry"):
            raise DataError("loss_norm must be 'patch' or 'entry'")

    # fields that must agree between a checkpoint and an expected config
    ARCH_FIELDS = (
        "tokenizer", "d_e", "enc_depth", "enc_heads", "d_d", "dec_depth", "dec_heads",
    )


@dataclass(frozen=True)
class MaskPlan:
    """Partition of patch indices into masked set M and visible complement."""

    n_patch: int
    masked: tuple

    def __post_init__(self):
        m = tuple(sorted(set(self.masked)))
        if m and (m[0] < 0 or m[-1] >= self.n_patch):
            raise DataError("masked indices out of range")
        object.__setattr__(self, "masked", m)

    @property
    def visible(self) -> tuple:
        hidden = set(self.masked)
        return tuple(p for p in range(self.n_patch) if p not in hidden)

    @property
    def n_masked(self) -> int:
        return len(self.masked)


def sample_mask(n_patch: int, mask_ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniformly random masked subset of size floor(mask_ratio * n_patch)."""
    if not 0.0 < mask_ratio < 1.0:
        raise DataError("mask_ratio must be in (0, 1)")
    m = int(np.floor(mask_ratio * n_patch))
    masked = rng.permutation(n_patch)[:m]
    return MaskPlan(n_patch=n_patch, masked=tuple(int(i) for i in masked))


def _block_values(x) -> np.ndarray:
    return x.block if isinstance(x, Patch) else np.asarray(x, dtype=np.float64)


def loss_recon(recon, targets, mask: MaskPlan, norm: str = "patch") -> float:
    """Reconstruction loss: (1/|M|) sum over masked patches of ||xhat - x||_F^2.

    ``recon`` and ``targets`` are full per-pair sequences; only masked
    positions are read.  With norm='entry' each patch residual is divided
    by its element count before averaging.
    """
    if mask.n_masked == 0:
        raise DataError("reconstruction loss undefined for an empty mask")
    if len(recon) != mask.n_patch or len(targets) != mask.n_patch:
        raise DataError("recon/target lists must cover every layout pair")
    total = 0.0
    for p in mask.masked:
        diff = _block_values(recon[p]) - _block_values(targets[p])
        sq = float(np.sum(diff * diff))
        total += sq / diff.size if norm == "entry" else sq
    return total / mask.n_masked


class MAEModel:
    """Tokenizer + transformer encoder/decoder + detokenizer with all state."""

    def __init__(self, config: MAEConfig, parc: Parcellation):
        self.config = config
        self.parc = parc
        self.layout = build_layout(parc)
        n_seq = self.layout.n_patch + 1
        rng = np.random.default_rng([config.seed, 0])
        store = nn.ParameterStore()
        self.store = store

        self.tokenizer = init_tokenizer(config.tokenizer, self.layout, config.d_e, rng)
        for name, t in self.tokenizer.parameters():
            store.register(f"tok.{name}", t)
        self.cls = store.add("cls", rng.normal(0.0, 0.02, (config.d_e,)))
        self.enc_pos = store.add("enc_pos", rng.normal(0.0, 0.02, (n_seq, config.d_e)))
        self.enc_blocks = [
            _init_block(store, f"enc.{i}", config.d_e, rng)
            for i in range(config.enc_depth)
        ]
        self.enc_norm_g = store.add("enc_norm.g", np.ones(config.d_e))
        self.enc_norm_b = store.add("enc_norm.b", np.zeros(config.d_e))
        self.proj_w = store.add("proj.w", rng.normal(0.0, 0.02, (config.d_e, config.d_d)))
        self.proj_b = store.add("proj.b", np.zeros(config.d_d))
        self.mask_tok = store.add("mask_tok", rng.normal(0.0, 0.02, (config.d_d,)))
        self.dec_pos = store.add("dec_pos", rng.normal(0.0, 0.02, (n_seq, config.d_d)))
        self.dec_blocks = [
            _init_block(store, f"dec.{i}", config.d_d, rng)
            for i in range(config.dec_depth)
        ]
        self.dec_norm_g = store.add("dec_norm.g", np.ones(config.d_d))
        self.dec_norm_b = store.add("dec_norm.b", np.zeros(config.d_d))
        self.detokenizer = init_detokenizer(config.tokenizer, self.layout, config.d_d, rng)
        for name, t in self.detokenizer.parameters():
            store.register(f"detok.{name}", t)

    @property
    def n_patch(self) -> int:
        return self.layout.n_patch


def _init_block(store: nn.ParameterStore, prefix: str, d: int, rng) -> dict:
    p = {}
    p["ln1_g"] = store.add(f"{prefix}.ln1.g", np.ones(d))
    p["ln1_b"] = store.add(f"{prefix}.ln1.b", np.zeros(d))
    for nm in ("wq", "wk", "wv", "wo"):
        p[nm] = store.add(f"{prefix}.attn.{nm}", rng.normal(0.0, 0.02, (d, d)))
    for nm in ("bq", "bk", "bv", "bo"):
        p[nm] = store.add(f"{prefix}.attn.{nm}", np.zeros(d))
    p["ln2_g"] = store.add(f"{prefix}.ln2.g", np.ones(d))
    p["ln2_b"] = store.add(f"{prefix}.ln2.b", np.zeros(d))
    p["w1"] = store.add(f"{prefix}.mlp.w1", rng.normal(0.0, 0.02, (d, 4 * d)))
    p["b1"] = store.add(f"{prefix}.mlp.b1", np.zeros(4 * d))
    p["w2"] = store.add(f"{prefix}.mlp.w2", rng.normal(0.0, 0.02, (4 * d, d)))
    p["b2"] = store.add(f"{prefix}.mlp.b2", np.zeros(d))
    return p


def _block_forward(p: dict, x: nn.Tensor, heads: int) -> nn.Tensor:
    # pre-norm residual block, MLP expansion 4, GELU
    h = nn.layer_norm(x, p["ln1_g"], p["ln1_b"])
    h = nn.multi_head_attention(
        h, p["wq"], p["bq"], p["wk"], p["bk"], p["wv"], p["bv"], p["wo"], p["bo"], heads
    )
    x = nn.add(x, h)
    h = nn.layer_norm(x, p["ln2_g"], p["ln2_b"])
    h = nn.gelu(nn.add(nn.matmul(h, p["w1"]), p["b1"]))
    h = nn.add(nn.matmul(h, p["w2"]), p["b2"])
    return nn.add(x, h)


def _with_cls_and_pos(model: MAEModel, tokens: nn.Tensor) -> nn.Tensor:
    b = tokens.shape[0]
    d_e = model.config.d_e
    cls_row = nn.broadcast_to(nn.reshape(model.cls, (1, 1, d_e)), (b, 1, d_e))
    seq = nn.concat([cls_row, tokens], axis=1)
    return nn.add(seq, model.enc_pos)


def _run_encoder(model: MAEModel, seq: nn.Tensor) -> nn.Tensor:
    h = seq
    for blk in model.enc_blocks:
        h = _block_forward(blk, h, model.config.enc_heads)
    return nn.layer_norm(h, model.enc_norm_g, model.enc_norm_b)


def _run_decoder(model: MAEModel, seq: nn.Tensor) -> nn.Tensor:
    h = seq
    for blk in model.dec_blocks:
        h = _block_forward(blk, h, model.config.dec_heads)
    return nn.layer_norm(h, model.dec_norm_g, model.dec_norm_b)


def batch_pretrain_loss(model: MAEModel, pair_blocks, plans):
    """Masked-reconstruction loss for a batch of subjects.

    ``pair_blocks[p]`` holds the pair-p blocks of all subjects, shape
    (B, |N_l|, |N_m|); ``plans`` is one MaskPlan per subject.  Returns the
    scalar loss tensor and per-pair reconstruction tensors (B, |N_l|, |N_m|).
    """
    n_patch = model.n_patch
    b = pair_blocks[0].shape[0]
    if len(plans) != b:
        raise DataError("one mask plan per subject required")
    n_masked = plans[0].n_masked
    if n_masked == 0:
        raise DataError("reconstruction loss undefined for an empty mask")
    for plan in plans:
        if plan.n_patch != n_patch:
            raise DataError("mask plan does not match model layout")
        if plan.n_masked != n_masked:
            raise DataError("mask plans must mask equally many patches")

    vis_idx = np.array(
        [[0] + [1 + p for p in plan.visible] for plan in plans], dtype=np.int64
    )
    weights = np.zeros((b, n_patch))
    for i, plan in enumerate(plans):
        weights[i, list(plan.masked)] = 1.0
    if model.config.loss_norm == "entry":
        sizes = np.array([nl * nm for nl, nm in model.layout.shapes], dtype=np.float64)
        weights = weights / sizes[None, :]

    tokens = model.tokenizer.forward_batch(pair_blocks)
    seq = _with_cls_and_pos(model, tokens)
    visible = nn.gather_rows(seq, vis_idx)
    h = _run_encoder(model, visible)
    z = nn.add(nn.matmul(h, model.proj_w), model.proj_b)

    d_d = model.config.d_d
    base = nn.broadcast_to(
        nn.reshape(model.mask_tok, (1, 1, d_d)), (b, n_patch + 1, d_d)
    )
    full = nn.scatter_rows(base, vis_idx, z)
    full = nn.add(full, model.dec_pos)
    dec = _run_decoder(model, full)

    loss_sum = None
    recons = []
    for p in range(n_patch):
        zp = nn.reshape(nn.take(dec, np.array([p + 1]), axis=1), (b, d_d))
        recon = model.detokenizer.decode_pair(p, zp)
        recons.append(recon)
        diff = nn.sub(recon, nn.Tensor(pair_blocks[p]))
        sq = nn.reduce_sum(nn.mul(diff, diff), axis=(1, 2))
        term = nn.reduce_sum(nn.mul(sq, nn.Tensor(weights[:, p])))
        loss_sum = term if loss_sum is None else nn.add(loss_sum, term)
    loss = nn.scale(loss_sum, 1.0 / (b * n_masked))
    return loss, recons


def forward_pretrain(model: MAEModel, patches, mask: MaskPlan):
    """Single-subject pretraining pass: (reconstructed masked patches, loss)."""
    _check_patches(model.layout, patches)
    if mask.n_patch != model.n_patch:
        raise DataError("mask plan does not match model layout")
    pair_blocks = [p.block[None, :, :] for p in patches]
    loss, recons = batch_pretrain_loss(model, pair_blocks, [mask])
    recon_patches = [
        Patch(pair=model.layout.pairs[p], block=recons[p].data[0]) for p in mask.masked
    ]
    return recon_patches, float(loss.data)


def encode(model: MAEModel, patches, pooling: str = "cls") -> np.ndarray:
    """Embed one subject: full (unmasked) sequence through the encoder."""
    _check_patches(model.layout, patches)
    pair_blocks = [p.block[None, :, :] for p in patches]
    return encode_blocks(model, pair_blocks, pooling)[0]


def encode_blocks(model: MAEModel, pair_blocks, pooling: str = "cls") -> np.ndarray:
    """Batched embedding: pair_blocks[p] is (B, |N_l|, |N_m|); returns (B, d_e)."""
    if pooling not in ("cls", "mean"):
        raise DataError(f"unknown pooling: {pooling!r} (use 'cls' or 'mean')")
    tokens = model.tokenizer.forward_batch(pair_blocks)
    h = _run_encoder(model, _with_cls_and_pos(model, tokens))
    if pooling == "cls":
        return h.data[:, 0, :].copy()
    return h.data[:, 1:, :].mean(axis=1)


def cohort_pair_blocks(model: MAEModel, cohort):
    """Stack every subject's patches per pair: list of (N, |N_l|, |N_m|) arrays."""
    per_pair = [[] for _ in model.layout.pairs]
    for s in cohort.subjects:
        for p, patch in enumerate(extract_patches(s.fc, model.parc, model.layout)):
            per_pair[p].append(patch.block)
    return [np.stack(blocks) for blocks in per_pair]


def encode_cohort(
    model: MAEModel, cohort, pooling: str = "cls", chunk: int = 256
) -> np.ndarray:
    """Embeddings for a whole cohort, subject order preserved."""
    if cohort.n_regions != model.parc.n_regions:
        raise DataError(
            f"cohort has {cohort.n_regions} regions, model expects {model.parc.n_regions}"
        )
    pair_blocks = cohort_pair_blocks(model, cohort)
    n = len(cohort)
    out = np.empty((n, model.config.d_e))
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        out[sl] = encode_blocks(model, [pb[sl] for pb in pair_blocks], pooling)
    return out


@dataclass
class TrainResult:
    curve: list
    warnings: list


def train(
    model: MAEModel,
    cohort,
    config: MAEConfig | None = None,
    start_epoch: int = 0,
    optimizer: nn.AdamW | None = None,
) -> TrainResult:
    """Pretrain the model in place; returns the per-epoch (epoch, loss, lr) curve.

    Shuffling and per-subject masks are drawn from a stream seeded by
    ``(config.seed, 1)``; resuming replays the skipped epochs' draws so a
    resumed run matches an uninterrupted one bit for bit.
    """
    config = config or model.config
    if cohort.n_regions != model.parc.n_regions:
        raise DataError("cohort region count does not match model")
    n = len(cohort)
    warnings_log = []
    batch = config.batch_size
    if batch > n:
        warnings_log.append(
            f"batch_size {batch} exceeds cohort size {n}; clamped to {n}"
        )
        batch = n
    pair_blocks = cohort_pair_blocks(model, cohort)
    n_patch = model.n_patch
    steps_per_epoch = (n + batch - 1) // batch
    if config.schedule_per_step:
        sched = nn.LRSchedule(
            config.base_lr,
            config.warmup_epochs * steps_per_epoch,
            config.epochs * steps_per_epoch,
        )
    else:
        sched = nn.LRSchedule(config.base_lr, config.warmup_epochs, config.epochs)
    opt = optimizer or nn.AdamW(lr=config.base_lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 1])

    def epoch_draws():
        order = rng.permutation(n)
        chunks = [order[i : i + batch] for i in range(0, n, batch)]
        plans = [
            [sample_mask(n_patch, config.mask_ratio, rng) for _ in chunk_ids]
            for chunk_ids in chunks
        ]
        return chunks, plans

    for _ in range(start_epoch):
        epoch_draws()

    curve = []
    global_step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch, config.epochs):
        epoch_lr = sched.at(global_step if config.schedule_per_step else epoch)
        chunks, all_plans = epoch_draws()
        loss_acc = 0.0
        for chunk_ids, plans in zip(chunks, all_plans):
            blocks = [pb[chunk_ids] for pb in pair_blocks]
            loss, _ = batch_pretrain_loss(model, blocks, plans)
            model.store.zero_grad()
            nn.backward(loss)
            opt.lr = sched.at(global_step) if config.schedule_per_step else epoch_lr
            opt.step(model.store)
            loss_acc += float(loss.data) * len(chunk_ids)
            global_step += 1
        curve.append((epoch + 1, loss_acc / n, epoch_lr))
    return TrainResult(curve=curve, warnings=warnings_log)


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, config text block, named float64 tensors,
# trailing CRC32 of everything before it


def _config_block(config: MAEConfig, meta: dict) -> bytes:
    lines = [f"{f.name}={getattr(config, f.name)}" for f in fields(config)]
    lines += [f"{k}={v}" for k, v in sorted(meta.items())]
    return ("\n".join(lines) + "\n").encode()


def _parse_config_block(raw: bytes):
    entries = {}
    for line in raw.decode().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            entries[key] = value
    kwargs = {}
    for f in fields(MAEConfig):
        if f.name not in entries:
            raise DataError(f"checkpoint config missing field {f.name!r}")
        raw_v = entries.pop(f.name)
        if f.type == "bool":
            kwargs[f.name] = raw_v == "True"
        elif f.type == "int":
            kwargs[f.name] = int(raw_v)
        elif f.type == "float":
            kwargs[f.name] = float(raw_v)
        else:
            kwargs[f.name] = raw_v
    return MAEConfig(**kwargs), entries


def save_checkpoint(model: MAEModel, path, epoch: int | None = None,
                    optimizer: nn.AdamW | None = None) -> None:
    """Serialize config, parcellation, parameters, and optional optimizer state."""
    meta = {}
    if epoch is not None:
        meta["epoch"] = int(epoch)
    tensors = [("parcellation", model.parc.assignment.astype(np.float64))]
    tensors += [(name, t.data) for name, t in model.store.items()]
    if optimizer is not None:
        meta["opt_step"] = optimizer.step_count
        tensors += [(f"opt.m.{k}", v) for k, v in optimizer.m.items()]
        tensors += [(f"opt.v.{k}", v) for k, v in optimizer.v.items()]

    buf = _io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    cfg = _config_block(model.config, meta)
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name, data in tensors:
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", data.ndim))
        for dim in data.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
    payload = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


@dataclass
class LoadedCheckpoint:
    model: MAEModel
    epoch: int | None
    optimizer: nn.AdamW | None


def load_checkpoint(path, expect: MAEConfig | None = None) -> LoadedCheckpoint:
    """Rebuild a model (and optimizer state, if stored) from a checkpoint file.

    With ``expect`` given, the stored architecture fields must match.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from exc
    if len(raw) < len(CKPT_MAGIC) + 8 or raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    payload, crc_raw = raw[:-4], raw[-4:]
    if zlib.crc32(payload) != struct.unpack("<I", crc_raw)[0]:
        raise DataError("corrupt checkpoint (CRC mismatch)")

    view = _io.BytesIO(payload)
    view.seek(len(CKPT_MAGIC))

    def read(n):
        chunk = view.read(n)
        if len(chunk) != n:
            raise DataError("corrupt checkpoint (truncated)")
        return chunk

    (version,) = struct.unpack("<I", read(4))
    if version != CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", read(4))
    config, meta = _parse_config_block(read(cfg_len))
    (n_tensors,) = struct.unpack("<I", read(4))
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", read(2))
        name = read(name_len).decode()
        (ndim,) = struct.unpack("<B", read(1))
        shape = tuple(struct.unpack("<I", read(4))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(read(8 * count), dtype="<f8").reshape(shape)
        tensors[name] = data.astype(np.float64)

    if expect is not None:
        bad = [
            f for f in MAEConfig.ARCH_FIELDS
            if getattr(expect, f) != getattr(config, f)
        ]
        if bad:
            raise DataError(
                "checkpoint does not match expected config (differs in "
                + ", ".join(f"{f}: {getattr(config, f)} != {getattr(expect, f)}" for f in bad)
                + ")"
            )

    if "parcellation" not in tensors:
        raise DataError("checkpoint missing parcellation")
    parc = Parcellation(assignment=tensors.pop("parcellation").astype(np.int64))
    model = MAEModel(config, parc)
    opt_m = {k[len("opt.m."):]: v for k, v in tensors.items() if k.startswith("opt.m.")}
    opt_v = {k[len("opt.v."):]: v for k, v in tensors.items() if k.startswith("opt.v.")}
    params = {
        k: v for k, v in tensors.items()
        if not (k.startswith("opt.m.") or k.startswith("opt.v."))
    }
    expected = set(model.store.names())
    if set(params) != expected:
        raise DataError("checkpoint parameter names do not match architecture")
    for name, data in params.items():
        slot = model.store[name]
        if slot.data.shape != data.shape:
            raise DataError(f"checkpoint tensor {name} has wrong shape")
        slot.data = data.copy()

    optimizer = None
    if "opt_step" in meta:
        optimizer = nn.AdamW(
            lr=config.base_lr,
            weight_decay=config.weight_decay,
            step_count=int(meta["opt_step"]),
            m={k: v.copy() for k, v in opt_m.items()},
            v={k: v.copy() for k, v in opt_v.items()},
        )
    epoch = int(meta["epoch"]) if "epoch" in meta else None
    return LoadedCheckpoint(model=model, epoch=epoch, optimizer=optimizer)

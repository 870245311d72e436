"""Small two-level encoder-decoder for binary pixel segmentation.

Used by the downstream protocol: trained on synthesized (image, mask)
pairs plus normal images, scored by pixel ranking, so the raw regression
output serves directly as the anomaly score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ShapeError, ValidationError
from .nn import conv2d, kaiming_init
from .optim import AdamW
from .seeding import params_hash, stream_seed
from .tensor import Tape, Tensor


@dataclass(frozen=True)
class SegmenterConfig:
    width: int = 16
    seed: int = 0
    dtype: str = "float32"

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


class Segmenter:
    def __init__(self, config: SegmenterConfig):
        self.config = config
        dt = config.np_dtype
        w = config.width
        rng = stream_seed(config.seed, "segmenter")
        p: dict[str, np.ndarray] = {}

        def conv(name, cin, cout):
            p[f"{name}.w"] = kaiming_init(rng, (9 * cin, cout), 9 * cin, dt)
            p[f"{name}.b"] = np.zeros(cout, dtype=dt)

        conv("c1", 3, w)
        conv("c2", w, 2 * w)
        conv("c3", 3 * w, w)
        conv("head", w, 1)
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            raise ShapeError("segmenter state keys mismatch")
        for k, t in self.params.items():
            t.data = arrays[k].astype(t.data.dtype).copy()

    def params_hash(self) -> str:
        return params_hash({k: t.data for k, t in self.params.items()})

    def forward(self, images: np.ndarray) -> Tensor:
        """[B,H,W,3] images -> [B,H,W] anomaly scores (unbounded)."""
        x = Tensor(np.asarray(images, dtype=self.config.np_dtype))
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ShapeError(f"expected [B,H,W,3] images, got {x.shape}")
        h0 = tt.gelu(conv2d(x, self.params["c1.w"], self.params["c1.b"]))
        h1 = tt.gelu(conv2d(tt.avg_pool2(h0), self.params["c2.w"], self.params["c2.b"]))
        u = tt.concat([tt.upsample2(h1), h0], axis=3)
        u = tt.gelu(conv2d(u, self.params["c3.w"], self.params["c3.b"]))
        out = conv2d(u, self.params["head.w"], self.params["head.b"])
        return tt.reshape(out, (x.shape[0], x.shape[1], x.shape[2]))

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.forward(images).data


def train_segmenter(pairs: list[tuple[np.ndarray, np.ndarray]], config: SegmenterConfig,
                    steps: int = 600, batch_size: int = 8, lr: float = 2e-3,
                    pos_weight: float = 8.0, seed: int = 0) -> Segmenter:
    """Weighted MSE regression of masks from images."""
    if not pairs:
        raise ValidationError("segmenter training needs at least one pair")
    seg = Segmenter(config)
    opt = AdamW(seg.params, lr=lr, weight_decay=1e-4)
    rng = stream_seed(seed, "segmenter.train")
    dt = config.np_dtype
    images = np.stack([p[0] for p in pairs]).astype(dt)
    masks = np.stack([(p[1] > 0).astype(dt) for p in pairs])
    for _ in range(steps):
        idx = rng.integers(0, len(pairs), size=batch_size)
        img = images[idx]
        tgt = masks[idx]
        weight = 1.0 + pos_weight * tgt
        opt.zero_grad()
        with Tape() as tape:
            pred = seg.forward(img)
            err = tt.square(tt.sub(pred, Tensor(tgt)))
            loss = tt.tmean(tt.mul(err, Tensor(weight)))
            tape.backward(loss)
        opt.step()
    return seg

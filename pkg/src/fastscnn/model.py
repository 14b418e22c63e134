"""Full network assembly, shape tracing and parameter/MAC accounting."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import prod
from typing import Optional

import numpy as np

from .blocks import FFM, PPM, AuxHead, BottleneckGroup, BottleneckSpec, Classifier, ConvBNReLU, DSConv, _finish
from .layers import LayerRecord, Module, Sequential
from .tensor import Tensor

DEFAULT_BOTTLENECKS = (BottleneckSpec(6, 64, 3, 2), BottleneckSpec(6, 96, 3, 2), BottleneckSpec(6, 128, 3, 1))

# Output shape (h, w, c) of each top-level block at the default 1024x2048 input.
BLOCK_BOUNDARIES = (
    ("lds.conv", (512, 1024, 32)),
    ("lds.dsconv1", (256, 512, 48)),
    ("lds.dsconv2", (128, 256, 64)),
    ("gfe.bottleneck1", (64, 128, 64)),
    ("gfe.bottleneck2", (32, 64, 96)),
    ("gfe.bottleneck3", (32, 64, 128)),
    ("gfe.ppm", (32, 64, 128)),
    ("ffm", (128, 256, 128)),
    ("classifier.dsconv", (128, 256, 128)),
)


@dataclass
class ModelConfig:
    num_classes: int = 19
    input_h: int = 1024
    input_w: int = 2048
    lds_widths: tuple = (32, 48, 64)
    bottlenecks: tuple = DEFAULT_BOTTLENECKS
    ppm_bins: tuple = (1, 2, 3, 6)
    ppm_out: int = 128
    ffm_out: int = 128
    dropout: float = 0.1
    zero_skip: bool = False
    mode: str = "cls"
    train: bool = False
    seed: int = 0

    @property
    def divisor(self) -> int:
        """Deepest stride product; input sides must be multiples of it."""
        return 8 * prod(b.s for b in self.bottlenecks)

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        d = self.divisor
        if self.input_h % d or self.input_w % d:
            raise ValueError(
                f"input size {self.input_h}x{self.input_w} must be divisible by {d} "
                f"(product of all strides)"
            )
        _check_bins(self.ppm_bins, self.input_h, self.input_w, d)
        if self.mode not in ("prob", "cls"):
            raise ValueError(f"mode must be 'prob' or 'cls', got {self.mode!r}")


def _check_bins(bins, h: int, w: int, divisor: int) -> None:
    gh, gw = h // divisor, w // divisor
    if max(bins) > min(gh, gw):
        raise ValueError(
            f"pyramid pooling bin {max(bins)} exceeds the {gh}x{gw} global-feature grid of a "
            f"{h}x{w} input; use smaller ppm_bins or a larger input"
        )


class FastSCNN(Module):
    """Learning-to-downsample -> global feature extractor -> fusion -> classifier.

    The only activation that crosses a module boundary out of order is the
    learning-to-downsample output feeding the fusion module's high-res input.
    ``zero_skip`` replaces that input with zeros.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        c1, c2, c3 = config.lds_widths
        self.lds = Sequential(
            conv=ConvBNReLU(3, c1, 3, 2, rng),
            dsconv1=DSConv(c1, c2, 2, rng),
            dsconv2=DSConv(c2, c3, 2, rng),
        )
        stages = {}
        cin = c3
        for i, spec in enumerate(config.bottlenecks, 1):
            stages[f"bottleneck{i}"] = BottleneckGroup(cin, spec, rng)
            cin = spec.c
        stages["ppm"] = PPM(cin, config.ppm_out, config.ppm_bins, rng)
        self.gfe = Sequential(**stages)
        self.factor = prod(b.s for b in config.bottlenecks)
        self.ffm = FFM(c3, config.ppm_out, config.ffm_out, self.factor, rng)
        self.classifier = Classifier(config.ffm_out, config.num_classes, config.dropout, rng, seed=config.seed)
        if config.train:
            self.aux_lds = AuxHead(c3, config.num_classes, rng)
            self.aux_gfe = AuxHead(config.ppm_out, config.num_classes, rng)
        self.zero_skip = config.zero_skip
        self.train(config.train)

    @property
    def has_aux(self) -> bool:
        return hasattr(self, "aux_lds")

    def topology(self) -> list[tuple[str, str]]:
        """Activation edges between top-level modules."""
        edges = [("input", "lds"), ("lds", "gfe"), ("gfe", "ffm.low"), ("lds", "ffm.high"), ("ffm", "classifier")]
        if self.has_aux:
            edges += [("lds", "aux_lds"), ("gfe", "aux_gfe")]
        return edges

    def check_input(self, shape) -> None:
        d = self.config.divisor
        if len(shape) != 4 or shape[1] != 3:
            raise ValueError(f"expected an image batch of shape (n, 3, H, W), got {tuple(shape)}")
        if shape[2] % d or shape[3] % d:
            raise ValueError(f"input size {shape[2]}x{shape[3]} must be divisible by {d}")
        _check_bins(self.config.ppm_bins, shape[2], shape[3], d)

    def _run(self, image: Tensor, mode: str, shapes: Optional[list]):
        self.check_input(image.shape)

        def mark(name, t):
            if shapes is not None:
                shapes.append((name, t.shape))
            return t

        x = image
        for name, m in self.lds.children():
            x = mark(f"lds.{name}", m(x))
        lds_out = x
        for name, m in self.gfe.children():
            x = mark(f"gfe.{name}", m(x))
        gfe_out = x
        high = Tensor(np.zeros_like(lds_out.data)) if self.zero_skip else lds_out
        x = mark("ffm", self.ffm(high, gfe_out))
        head = self.classifier
        x = mark("classifier.dsconv", head.dsconv2(head.dsconv1(x)))
        x = mark("classifier.conv", head.conv(head.dropout(x)))
        size = tuple(image.shape[2:])
        out = _finish(mark("classifier.up", head.up(x, size)), mode)
        if self.training and self.has_aux and mode == "logits":
            return out, self.aux_lds(lds_out, size), self.aux_gfe(gfe_out, size)
        return out

    def forward(self, image: Tensor, shapes: Optional[list] = None):
        """Logits at input resolution; in training mode with aux heads, a tuple
        ``(logits, aux_lds_logits, aux_gfe_logits)``."""
        return self._run(image, "logits", shapes)

    def infer(self, image, mode: Optional[str] = None):
        """Inference-mode prediction: probabilities (``prob``) or labels (``cls``)."""
        mode = mode or self.config.mode
        if mode not in ("prob", "cls"):
            raise ValueError(f"mode must be 'prob' or 'cls', got {mode!r}")
        if not isinstance(image, Tensor):
            image = Tensor(image)
        was_training = self.training
        self.eval()
        try:
            out = self._run(image, mode, None)
        finally:
            self.train(was_training)
        return out.data if isinstance(out, Tensor) else out

    def trace_blocks(self, shape, include_aux: bool = False) -> list[tuple[str, tuple, list[LayerRecord]]]:
        """Symbolic propagation grouped by block: ``(block name, output shape, leaf records)``."""
        self.check_input(shape)
        blocks = []

        def step(name, module, s, prefix=None, **kw):
            try:
                out, recs = module.trace(s, prefix or f"{name}.", **kw)
            except ValueError as err:
                raise ValueError(f"shape propagation failed at {name}: {err}") from err
            blocks.append((name, out, recs))
            return out

        s = shape
        for name, m in self.lds.children():
            s = step(f"lds.{name}", m, s)
        lds_out = s
        for name, m in self.gfe.children():
            s = step(f"gfe.{name}", m, s)
        gfe_out = s
        try:
            s, recs = self.ffm.trace(lds_out, gfe_out, "ffm.")
        except ValueError as err:
            raise ValueError(f"shape propagation failed at ffm: {err}") from err
        blocks.append(("ffm", s, recs))
        head = self.classifier
        s, r1 = head.dsconv1.trace(s, "classifier.dsconv1.")
        s, r2 = head.dsconv2.trace(s, "classifier.dsconv2.")
        blocks.append(("classifier.dsconv", s, r1 + r2))
        s, r1 = head.dropout.trace(s, "classifier.dropout.")
        s, r2 = head.conv.trace(s, "classifier.conv.")
        blocks.append(("classifier.conv", s, r1 + r2))
        size = tuple(shape[2:])
        step("classifier.up", head.up, s, "classifier.up.", size=size)
        if include_aux and self.has_aux:
            step("aux_lds", self.aux_lds, lds_out, size=size)
            step("aux_gfe", self.aux_gfe, gfe_out, size=size)
        return blocks


def build(config: Optional[ModelConfig] = None, **overrides) -> FastSCNN:
    config = replace(config or ModelConfig(), **overrides)
    return FastSCNN(config)


def shape_trace(model: FastSCNN, input_h: Optional[int] = None, input_w: Optional[int] = None,
                batch: int = 1, detail: str = "block") -> list[tuple[str, tuple]]:
    """Ordered ``(name, output shape)`` rows without running the network.

    ``detail="block"`` gives one row per architecture-table block (plus the final
    upsample); ``detail="layer"`` gives every leaf layer.
    """
    h = input_h or model.config.input_h
    w = input_w or model.config.input_w
    blocks = model.trace_blocks((batch, 3, h, w))
    if detail == "block":
        return [(name, out) for name, out, _ in blocks]
    return [(r.name, r.out_shape) for _, _, recs in blocks for r in recs]


@dataclass
class ParamCount:
    per_layer: dict = field(default_factory=dict)
    total: int = 0
    aux: int = 0

    @property
    def without_aux(self) -> int:
        return self.total - self.aux


def count_params(model: Module) -> ParamCount:
    """Trainable parameters (conv weights, BN affine); running statistics excluded."""
    report = ParamCount()
    for name, p in model.named_parameters():
        layer = name.rsplit(".", 1)[0]
        report.per_layer[layer] = report.per_layer.get(layer, 0) + p.data.size
        report.total += p.data.size
        if name.startswith("aux_"):
            report.aux += p.data.size
    return report


@dataclass
class FlopReport:
    per_layer: list
    total_macs: int
    total_elem_ops: int


def count_flops(model: FastSCNN, input_h: Optional[int] = None, input_w: Optional[int] = None,
                training: bool = False, batch: int = 1) -> FlopReport:
    """Convolution multiply-accumulates per layer, with per-element op counts
    (BN, ReLU, resize, pooling, adds) reported separately.  Aux heads count only
    when ``training``."""
    h = input_h or model.config.input_h
    w = input_w or model.config.input_w
    blocks = model.trace_blocks((batch, 3, h, w), include_aux=training)
    records = [r for _, _, recs in blocks for r in recs]
    return FlopReport(records, sum(r.macs for r in records), sum(r.elem_ops for r in records))


def summary_report(model: FastSCNN, input_h: Optional[int] = None, input_w: Optional[int] = None) -> str:
    """Fixed-width per-layer table followed by ``key=value`` totals."""
    h = input_h or model.config.input_h
    w = input_w or model.config.input_w
    blocks = model.trace_blocks((1, 3, h, w), include_aux=True)
    lines = [f"{'layer':<44}{'kind':<9}{'output':>20}{'params':>10}{'macs':>14}"]
    for block, out, recs in blocks:
        for r in recs:
            shape = "x".join(str(d) for d in r.out_shape)
            lines.append(f"{r.name:<44}{r.kind:<9}{shape:>20}{r.params:>10}{r.macs:>14}")
    lines.append("")
    lines.append("block boundaries (h x w x c):")
    for block, out, _ in blocks:
        lines.append(f"  {block:<24}{out[2]}x{out[3]}x{out[1]}")
    params = count_params(model)
    infer = count_flops(model, h, w)
    lines.append("")
    lines.append(f"params_total={params.total}")
    lines.append(f"params_without_aux={params.without_aux}")
    lines.append(f"params_millions={params.without_aux / 1e6:.2f}")
    lines.append(f"macs_inference={infer.total_macs}")
    lines.append(f"elem_ops_inference={infer.total_elem_ops}")
    return "\n".join(lines)

"""Layer layout shared by the encoder and the generative model."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field


@dataclass(frozen=True)
class LayerSpec:
    """One level of the activation hierarchy.

    ``td_*``, ``mixtures`` and ``offset_range`` describe how this layer is
    generated from the layer above; they are unused on the top layer.
    ``bottom_up`` is one of ``"input"``, ``"conv_relu_pool"`` or ``"classifier"``.
    """

    name: str
    channels: int
    height: int
    width: int
    bottom_up: str
    bu_kernel: int = 3
    td_kernel: int = 4
    td_stride: int = 2
    mixtures: int = 1
    offset_range: int = 0

    @property
    def shape(self):
        return (self.channels, self.height, self.width)

    @property
    def n_offsets(self) -> int:
        return (2 * self.offset_range + 1) ** 2

    def offsets(self):
        """All (dy, dx) in lexicographic order."""
        d = self.offset_range
        return [(dy, dx) for dy in range(-d, d + 1) for dx in range(-d, d + 1)]


@dataclass(frozen=True)
class HierarchySpec:
    layers: tuple
    ngram_order: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    @property
    def L(self) -> int:
        """Index of the category layer."""
        return len(self.layers) - 1

    @property
    def num_categories(self) -> int:
        return self.layers[-1].channels

    def __getitem__(self, l) -> LayerSpec:
        return self.layers[l]

    def validate(self):
        if len(self.layers) < 2:
            raise ValueError("hierarchy needs at least an input and a category layer")
        if self.layers[0].bottom_up != "input":
            raise ValueError("layer 0 must be the input image")
        top = self.layers[-1]
        if top.bottom_up != "classifier" or (top.height, top.width) != (1, 1):
            raise ValueError("top layer must be a 1x1 classifier layer")
        if self.ngram_order < 0:
            raise ValueError("ngram_order must be >= 0")
        for l in range(self.L):
            lo, up = self.layers[l], self.layers[l + 1]
            if lo.mixtures < 1 or lo.offset_range < 0:
                raise ValueError(f"layer {l}: need mixtures >= 1 and offset_range >= 0")
            s = lo.td_stride
            if (up.height * s, up.width * s) != (lo.height, lo.width):
                raise ValueError(
                    f"layer {l}: {up.height}x{up.width} times stride {s} != {lo.height}x{lo.width}"
                )
            if lo.td_kernel < s or (lo.td_kernel - s) % 2:
                raise ValueError(f"layer {l}: td kernel {lo.td_kernel} incompatible with stride {s}")
            if 0 < l + 1 < self.L:
                if up.bottom_up != "conv_relu_pool" or (lo.height, lo.width) != (2 * up.height, 2 * up.width):
                    raise ValueError(f"layer {l + 1}: conv_relu_pool must halve the spatial size")

    def to_dict(self):
        return {"ngram_order": self.ngram_order, "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(LayerSpec(**l) for l in d["layers"]), ngram_order=d.get("ngram_order", 1))


def t3(num_categories: int = 2, top_mixtures: int = 16, mixtures: int = 4,
       top_offset: int = 2, offset: int = 1, ngram_order: int = 1) -> HierarchySpec:
    """Desk-scale default: 1x32x32 image, three conv/relu/pool stages, category layer."""
    return HierarchySpec((
        LayerSpec("image", 1, 32, 32, "input", td_kernel=4, td_stride=2,
                  mixtures=mixtures, offset_range=0),
        LayerSpec("pool1", 8, 16, 16, "conv_relu_pool", td_kernel=4, td_stride=2,
                  mixtures=mixtures, offset_range=offset),
        LayerSpec("pool2", 16, 8, 8, "conv_relu_pool", td_kernel=4, td_stride=2,
                  mixtures=mixtures, offset_range=offset),
        LayerSpec("pool3", 32, 4, 4, "conv_relu_pool", td_kernel=4, td_stride=4,
                  mixtures=top_mixtures, offset_range=top_offset),
        LayerSpec("category", num_categories, 1, 1, "classifier", td_kernel=0, td_stride=1),
    ), ngram_order=ngram_order)


def micro(num_categories: int = 1, mixtures=(2, 2), offsets=(1, 1), ngram_order: int = 1) -> HierarchySpec:
    """Two generative layers on tiny maps, small enough for exhaustive oracles.

    Layer 0 is 1x4x4, layer 1 is 2x2x2, layer 2 holds the categories.
    """
    return HierarchySpec((
        LayerSpec("image", 1, 4, 4, "input", td_kernel=2, td_stride=2,
                  mixtures=mixtures[0], offset_range=offsets[0]),
        LayerSpec("pool1", 2, 2, 2, "conv_relu_pool", td_kernel=2, td_stride=2,
                  mixtures=mixtures[1], offset_range=offsets[1]),
        LayerSpec("category", num_categories, 1, 1, "classifier", td_kernel=0, td_stride=1),
    ), ngram_order=ngram_order)

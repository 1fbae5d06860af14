"""Shared part decoder, transform localization, and shape assembly (the
Composer).

Part embeddings are decoded one at a time by a single shared decoder into
centered, scaled part volumes; a localization net predicts one 12-DOF
affine transform per part from the decoded parts plus the summed part
embeddings; the differentiable resampler places each part, and the argmax
over placed parts yields the labeled output shape.
"""

import numpy as np

from . import autodiff as ad
from .decomposer import EMBED_DIM, he_init, xavier_init
from .voxel import AffineParams, LabeledGrid

IDENTITY_THETA = np.array([1.0, 0, 0, 0, 1.0, 0, 0, 0, 1.0, 0, 0, 0])
ASSEMBLE_TAU = 0.5
DECODER_CHANNELS = (64, 32, 16)
LOCALIZER_CHANNELS = (8, 16)
LOCALIZER_FEATURES = 64
LOCALIZER_HIDDEN = 256


def _deconv_chain(resolution, base, channels):
    """In/out channel pairs for the transposed convs lifting base^3 -> R^3."""
    steps = 0
    size = base
    while size < resolution:
        size *= 2
        steps += 1
    if size != resolution:
        raise ValueError(f"resolution {resolution} unreachable from base {base}")
    chain = list(channels[:steps])
    if len(chain) < steps:
        raise ValueError(f"need {steps} channel sizes, got {channels}")
    return list(zip(chain, chain[1:] + [None]))  # None marks the output layer


class PartDecoderNet:
    """Linear seed into a 4^3 grid, then transposed convs up to R^3.

    The channel stack (64, 32, 16) is consumed front-to-front, so 32^3
    output uses all three transposed convs and 16^3 uses two.
    """

    BASE = 4

    def __init__(self, resolution, n=EMBED_DIM, channels=DECODER_CHANNELS, rng=None):
        rng = rng or np.random.default_rng(0)
        self.resolution = resolution
        self.n = n
        self.channels = tuple(channels)
        self.base = min(self.BASE, resolution // 2)
        self.params = {}
        pairs = _deconv_chain(resolution, self.base, self.channels)
        seed_size = pairs[0][0] * self.base**3
        self.params["partdec.seed.W"] = ad.DiffValue(
            xavier_init(rng, (n, seed_size), n, seed_size)
        )
        self.params["partdec.seed.b"] = ad.DiffValue(np.zeros(seed_size))
        self._steps = len(pairs)
        for i, (cin, cout) in enumerate(pairs):
            cout = cout or 1
            fan = cin * 64
            self.params[f"partdec.d{i}.W"] = ad.DiffValue(
                he_init(rng, (cin, cout, 4, 4, 4), fan)
            )
            self.params[f"partdec.d{i}.b"] = ad.DiffValue(np.zeros(cout))

    def forward(self, embedding):
        """Part embedding (n,) -> canonical volume (R, R, R) in (0, 1)."""
        x = ad.relu(ad.dense(embedding, self.params["partdec.seed.W"], self.params["partdec.seed.b"]))
        x = ad.reshape(x, (self.channels[0], self.base, self.base, self.base))
        for i in range(self._steps):
            x = ad.conv3_transpose(x, self.params[f"partdec.d{i}.W"], self.params[f"partdec.d{i}.b"])
            x = ad.relu(x) if i < self._steps - 1 else ad.sigmoid(x)
        return ad.reshape(x, (self.resolution,) * 3)


class LocalizationNet:
    """Predicts K 12-DOF transforms from decoded parts and summed embeddings.

    Each part volume runs through a shared conv branch to a feature vector;
    per-part features are fused (concatenated in part order, or max-pooled),
    joined with the embedding sum, and regressed to 12K parameters. The
    output layer starts at zero weights with identity-transform biases, so
    a fresh net is exactly the identity for every part.
    """

    def __init__(self, resolution, k, n=EMBED_DIM, channels=LOCALIZER_CHANNELS, rng=None,
                 fusion="concat"):
        rng = rng or np.random.default_rng(0)
        if resolution % (2 ** len(channels)) != 0:
            raise ValueError(f"resolution {resolution} not divisible by 2^{len(channels)}")
        if fusion not in ("concat", "maxpool"):
            raise ValueError(f"unknown fusion {fusion!r}")
        self.resolution = resolution
        self.k = k
        self.n = n
        self.fusion = fusion
        self.channels = tuple(channels)
        self.params = {}
        cin = 1
        for i, cout in enumerate(self.channels):
            fan = cin * 64
            self.params[f"stn.c{i}.W"] = ad.DiffValue(he_init(rng, (cout, cin, 4, 4, 4), fan))
            self.params[f"stn.c{i}.b"] = ad.DiffValue(np.zeros(cout))
            cin = cout
        spatial = resolution // (2 ** len(self.channels))
        self._flat = cin * spatial**3
        self.params["stn.feat.W"] = ad.DiffValue(
            xavier_init(rng, (self._flat, LOCALIZER_FEATURES), self._flat, LOCALIZER_FEATURES)
        )
        self.params["stn.feat.b"] = ad.DiffValue(np.zeros(LOCALIZER_FEATURES))
        fused = LOCALIZER_FEATURES * (k if fusion == "concat" else 1) + n
        self.params["stn.fc1.W"] = ad.DiffValue(
            xavier_init(rng, (fused, LOCALIZER_HIDDEN), fused, LOCALIZER_HIDDEN)
        )
        self.params["stn.fc1.b"] = ad.DiffValue(np.zeros(LOCALIZER_HIDDEN))
        self.params["stn.out.W"] = ad.DiffValue(np.zeros((LOCALIZER_HIDDEN, 12 * k)))
        self.params["stn.out.b"] = ad.DiffValue(np.tile(IDENTITY_THETA, k))

    def forward(self, part_volumes, e_sum):
        """K volumes (R^3 DiffValues) + embedding sum -> list of K thetas."""
        if len(part_volumes) != self.k:
            raise ValueError(f"expected {self.k} part volumes, got {len(part_volumes)}")
        feats = []
        for vol in part_volumes:
            x = ad.reshape(vol, (1, *vol.shape))
            for i in range(len(self.channels)):
                x = ad.relu(ad.conv3(x, self.params[f"stn.c{i}.W"], self.params[f"stn.c{i}.b"]))
            feats.append(ad.relu(
                ad.dense(ad.reshape(x, (self._flat,)), self.params["stn.feat.W"], self.params["stn.feat.b"])
            ))
        if self.fusion == "concat":
            fused = ad.concat(feats + [e_sum])
        else:
            pooled = feats[0]
            for f in feats[1:]:
                pooled = ad.vmax(pooled, f)
            fused = ad.concat([pooled, e_sum])
        h = ad.relu(ad.dense(fused, self.params["stn.fc1.W"], self.params["stn.fc1.b"]))
        out = ad.dense(h, self.params["stn.out.W"], self.params["stn.out.b"])
        return [ad.narrow(out, 12 * i, 12) for i in range(self.k)]


class MonolithicComposerNet:
    """Ablation composer: two dense layers on the embedding sum, then a
    deconv stack straight to a (K+1)-channel label volume; no per-part
    decoding and no transforms."""

    def __init__(self, resolution, k, n=EMBED_DIM, channels=DECODER_CHANNELS, rng=None):
        rng = rng or np.random.default_rng(0)
        self.resolution = resolution
        self.k = k
        self.n = n
        self.channels = tuple(channels)
        self.base = min(PartDecoderNet.BASE, resolution // 2)
        pairs = _deconv_chain(resolution, self.base, self.channels)
        self._steps = len(pairs)
        self.params = {
            "mono.fc1.W": ad.DiffValue(xavier_init(rng, (n, LOCALIZER_HIDDEN), n, LOCALIZER_HIDDEN)),
            "mono.fc1.b": ad.DiffValue(np.zeros(LOCALIZER_HIDDEN)),
        }
        seed_size = pairs[0][0] * self.base**3
        self.params["mono.fc2.W"] = ad.DiffValue(
            xavier_init(rng, (LOCALIZER_HIDDEN, seed_size), LOCALIZER_HIDDEN, seed_size)
        )
        self.params["mono.fc2.b"] = ad.DiffValue(np.zeros(seed_size))
        for i, (cin, cout) in enumerate(pairs):
            cout = cout or (k + 1)
            fan = cin * 64
            self.params[f"mono.d{i}.W"] = ad.DiffValue(he_init(rng, (cin, cout, 4, 4, 4), fan))
            self.params[f"mono.d{i}.b"] = ad.DiffValue(np.zeros(cout))

    def forward(self, e_sum):
        """Summed part embeddings -> (K+1, R, R, R) label logits."""
        x = ad.relu(ad.dense(e_sum, self.params["mono.fc1.W"], self.params["mono.fc1.b"]))
        x = ad.relu(ad.dense(x, self.params["mono.fc2.W"], self.params["mono.fc2.b"]))
        x = ad.reshape(x, (self.channels[0], self.base, self.base, self.base))
        for i in range(self._steps):
            x = ad.conv3_transpose(x, self.params[f"mono.d{i}.W"], self.params[f"mono.d{i}.b"])
            if i < self._steps - 1:
                x = ad.relu(x)
        return x


# ---------------------------------------------------------------------------
# functional pieces


def decode_part(embedding, net):
    return net.forward(embedding)


def localize(part_volumes, e_sum, net):
    return net.forward(part_volumes, e_sum)


def assemble(transformed, schema, tau=ASSEMBLE_TAU):
    """Transformed part volumes -> labeled grid.

    Voxel label is argmax over parts where the best value reaches tau,
    else empty; np.argmax breaks ties toward the lowest part index.
    """
    stack = np.stack([v.data if isinstance(v, ad.DiffValue) else np.asarray(v) for v in transformed])
    if stack.shape[0] != schema.K:
        raise ValueError(f"expected {schema.K} volumes, got {stack.shape[0]}")
    best = stack.max(axis=0)
    labels = np.where(best >= tau, stack.argmax(axis=0) + 1, 0)
    return LabeledGrid(labels, schema)


def compose_graph(part_embeddings, decoder, localizer):
    """Differentiable composition; returns all intermediates for losses."""
    canonicals = [decode_part(e, decoder) for e in part_embeddings]
    e_sum = part_embeddings[0]
    for e in part_embeddings[1:]:
        e_sum = ad.add(e_sum, e)
    thetas = localize(canonicals, e_sum, localizer)
    placed = [ad.grid_sample3(c, t) for c, t in zip(canonicals, thetas)]
    occupancy = placed[0]
    for p in placed[1:]:
        occupancy = ad.vmax(occupancy, p)
    return {
        "canonicals": canonicals,
        "e_sum": e_sum,
        "thetas": thetas,
        "placed": placed,
        "occupancy": occupancy,
    }


def compose(part_embeddings, decoder, localizer, schema, tau=ASSEMBLE_TAU):
    """Inference composition: (LabeledGrid, canonical volumes, transforms)."""
    graph = compose_graph(part_embeddings, decoder, localizer)
    labeled = assemble(graph["placed"], schema, tau)
    canonicals = [c.data for c in graph["canonicals"]]
    transforms = [AffineParams.from_vector(t.data) for t in graph["thetas"]]
    return labeled, canonicals, transforms


def compose_monolithic(part_embeddings, net, schema):
    """Ablation composition: per-voxel argmax over softmax label channels."""
    e_sum = part_embeddings[0]
    for e in part_embeddings[1:]:
        e_sum = ad.add(e_sum, e)
    logits = net.forward(e_sum)
    probs = ad.softmax(logits, axis=0)
    labels = probs.data.argmax(axis=0)
    return LabeledGrid(labels, schema), logits, probs

"""The full Decomposer-Composer model: construction, inference, persistence.

A model bundles the shape encoder, the projection set, and either the part
decoder + localization net (full pipeline) or the monolithic label decoder
(no-transform ablation). Checkpoints are PFCK1 files holding every
parameter plus numeric `meta.*` records, so a model reloads bit-exactly
from the file alone.
"""

import numpy as np

from . import autodiff as ad
from . import composer as cp
from . import decomposer as dc
from .voxel import CHAIR_SCHEMA, PartSchema


class DecomposerComposer:
    """End-to-end model over one resolution and part schema."""

    def __init__(self, resolution=16, schema=CHAIR_SCHEMA, n=dc.EMBED_DIM, seed=0,
                 monolithic=False, fusion="concat"):
        self.resolution = resolution
        self.schema = schema
        self.n = n
        self.seed = seed
        self.monolithic = monolithic
        self.fusion = fusion
        rng = np.random.default_rng(seed)
        self.encoder = dc.EncoderNet(resolution, n, rng=rng)
        self.projections = dc.ProjectionSet(n, schema.K)
        if monolithic:
            self.part_decoder = None
            self.localizer = None
            self.mono = cp.MonolithicComposerNet(resolution, schema.K, n, rng=rng)
        else:
            self.part_decoder = cp.PartDecoderNet(resolution, n, rng=rng)
            self.localizer = cp.LocalizationNet(resolution, schema.K, n, rng=rng, fusion=fusion)
            self.mono = None

    @property
    def params(self):
        nets = [self.encoder, self.projections]
        nets += [self.mono] if self.monolithic else [self.part_decoder, self.localizer]
        merged = {}
        for net in nets:
            merged.update(net.params)
        return merged

    def param_groups(self):
        groups = {
            "encoder": self.encoder.params,
            "proj": self.projections.params,
        }
        if self.monolithic:
            groups["mono"] = self.mono.params
        else:
            groups["partdec"] = self.part_decoder.params
            groups["stn"] = self.localizer.params
        return groups

    # -- inference ---------------------------------------------------------

    def embed_whole(self, occupancy):
        if not isinstance(occupancy, ad.DiffValue):
            occupancy = np.asarray(occupancy, dtype=np.float64)
        return self.encoder.forward(occupancy)

    def embed_parts(self, occupancy):
        """Occupancy array -> K part-embedding DiffValues."""
        return dc.project(self.embed_whole(occupancy), self.projections)

    def compose_parts(self, codes):
        """K part embeddings -> (LabeledGrid, canonical volumes, transforms).

        The monolithic ablation has no per-part decoder, so its canonical
        volumes and transforms are empty.
        """
        if self.monolithic:
            labeled, _, _ = cp.compose_monolithic(codes, self.mono, self.schema)
            return labeled, [], []
        return cp.compose(codes, self.part_decoder, self.localizer, self.schema)

    def reconstruct(self, occupancy):
        labeled, _, _ = self.compose_parts(self.embed_parts(occupancy))
        return labeled

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        record = dict(self.params)
        names = " ".join(self.schema.names).encode("ascii")
        record["meta.resolution"] = np.array(float(self.resolution))
        record["meta.embed_dim"] = np.array(float(self.n))
        record["meta.part_count"] = np.array(float(self.schema.K))
        record["meta.monolithic"] = np.array(float(self.monolithic))
        record["meta.seed"] = np.array(float(self.seed))
        record["meta.concat_fusion"] = np.array(float(self.fusion == "concat"))
        record["meta.schema_utf8"] = np.array(list(names), dtype=np.float64)
        ad.save_checkpoint(record, path)

    @classmethod
    def load(cls, path):
        record = ad.load_checkpoint(path)
        names = bytes(int(b) for b in record["meta.schema_utf8"]).decode("ascii")
        concat = bool(record.get("meta.concat_fusion", np.array(1.0)))
        model = cls(
            resolution=int(record["meta.resolution"]),
            schema=PartSchema(tuple(names.split())),
            n=int(record["meta.embed_dim"]),
            seed=int(record["meta.seed"]),
            monolithic=bool(record["meta.monolithic"]),
            fusion="concat" if concat else "maxpool",
        )
        params = model.params
        missing = set(params) - set(record)
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {sorted(missing)[:4]}...")
        for name, value in params.items():
            if record[name].shape != value.data.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            value.data = record[name].copy()
        return model

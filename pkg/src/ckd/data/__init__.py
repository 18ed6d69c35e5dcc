from .csi import CsiSample, DataFormatError, magnitude_normalize, parse_csi_file, serialize_csi
from .split import DatasetSplit, split_dataset
from .store import CrossModalData, assemble, load_dataset, read_float_map, save_dataset, write_float_map
from .sync import FrameRecord, SyncedPair, SyncResult, match_timestamps, synchronize
from .synth import ChannelModel, SynthConfig, SynthDataset, render_stick_figure, synth_generate, template_distance

__all__ = [
    "ChannelModel",
    "CrossModalData",
    "CsiSample",
    "DataFormatError",
    "DatasetSplit",
    "FrameRecord",
    "SyncResult",
    "SyncedPair",
    "SynthConfig",
    "SynthDataset",
    "assemble",
    "load_dataset",
    "magnitude_normalize",
    "match_timestamps",
    "parse_csi_file",
    "read_float_map",
    "render_stick_figure",
    "save_dataset",
    "serialize_csi",
    "split_dataset",
    "synchronize",
    "synth_generate",
    "template_distance",
    "write_float_map",
]


def synth_to_data(ds: SynthDataset) -> CrossModalData:
    return assemble(ds.frames, ds.csi, [(p.frame.frame_index, p.csi_row, p.lag_ms) for p in ds.pairs])

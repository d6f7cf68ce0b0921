__all__ = [
    "augment",
    "common_base",
    "common_report",
    "contrastive",
    "dino",
    "filetree",
    "geo_sampler",
    "probe",
    "tensor_nn",
    "tile_ingest",
]

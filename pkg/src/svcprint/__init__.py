"""Service-level behavioural fingerprints of IoT devices from flow records."""

from .flow_model import (
    DeviceStream,
    FlowRecord,
    Observation,
    Protocol,
    ServiceKey,
    TimeWindow,
    dedup_flows,
    index_to_service,
    parse_flows,
    read_flows,
    service_index,
    slice_window,
)
from .representation import INFINITY, ServiceVector, cosine_similarity, l1_norm, repr_g, repr_sl, repr_sp
from .exporter import DidNotConverge, ExportConfig, Fingerprint, export_fingerprint, window_schedule

__all__ = [
    "DeviceStream", "FlowRecord", "Observation", "Protocol", "ServiceKey", "TimeWindow",
    "dedup_flows", "index_to_service", "parse_flows", "read_flows", "service_index", "slice_window",
    "INFINITY", "ServiceVector", "cosine_similarity", "l1_norm", "repr_g", "repr_sl", "repr_sp",
    "DidNotConverge", "ExportConfig", "Fingerprint", "export_fingerprint", "window_schedule",
]

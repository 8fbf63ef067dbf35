//! Selective state-space machinery: ZOH discretization, the sequential
//! and chunked scans, and the Mamba-style block with its bidirectional
//! wrapper.

mod block;
pub mod scan;

pub use block::{
    bmamba, mamba_block, BMambaParams, BMambaVars, MambaBlockParams, MambaBlockVars, CONV_KERNEL,
    DT_INIT_RANGE, EXPAND,
};
pub use scan::{chunked_scan, chunked_scan_at, discretize, selective_scan, ScanDims};

//! Binary network checkpoints.
//!
//! Layout: magic `FRMG`, version `u32`, depth `u32`, widths `(depth+1) x u32`,
//! then the row-major `f64` payload of each weight matrix in layer order. All
//! integers and floats are little-endian. A JSON sidecar next to the binary
//! (same stem, `.json` extension) holds the [`MlpConfig`]; loading
//! cross-checks sidecar widths against the header. Round-trips are bit-exact.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt};

use crate::linalg::Matrix;

use super::{Mlp, MlpConfig, NetError};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FRMG";
pub const CHECKPOINT_VERSION: u32 = 1;

fn sidecar_path(bin_path: &Path) -> PathBuf {
    bin_path.with_extension("json")
}

/// Writes `<path>` (binary weights) and `<path stem>.json` (config sidecar).
pub fn save_checkpoint(net: &Mlp, bin_path: &Path) -> Result<(), NetError> {
    let widths = &net.config().widths;
    let mut buf = Vec::with_capacity(16 + widths.len() * 4);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(net.depth() as u32).to_le_bytes());
    for &w in widths {
        buf.extend_from_slice(&(w as u32).to_le_bytes());
    }
    for w in net.weights() {
        for &v in w.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(bin_path, &buf)?;
    let sidecar = serde_json::to_vec_pretty(net.config())?;
    fs::write(sidecar_path(bin_path), sidecar)?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(bin_path: &Path) -> Result<Mlp, NetError> {
    let bytes = fs::read(bin_path)?;
    let mut cur = Cursor::new(bytes.as_slice());

    let mut magic = [0u8; 4];
    if std::io::Read::read_exact(&mut cur, &mut magic).is_err() {
        return Err(NetError::CheckpointLength { offset: 0 });
    }
    if magic != CHECKPOINT_MAGIC {
        return Err(NetError::BadMagic { found: magic });
    }
    let version = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| NetError::CheckpointLength { offset: 4 })?;
    if version != CHECKPOINT_VERSION {
        return Err(NetError::BadVersion { found: version });
    }
    let depth = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| NetError::CheckpointLength { offset: 8 })? as usize;
    let mut widths = Vec::with_capacity(depth + 1);
    for _ in 0..=depth {
        let offset = cur.position() as usize;
        let w = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| NetError::CheckpointLength { offset })? as usize;
        widths.push(w);
    }

    let mut weights = Vec::with_capacity(depth);
    for l in 0..depth {
        let (rows, cols) = (widths[l + 1], widths[l]);
        if rows == 0 || cols == 0 {
            return Err(NetError::BadConfig(format!(
                "checkpoint header carries zero width: {widths:?}"
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let offset = cur.position() as usize;
            let v = cur
                .read_f64::<LittleEndian>()
                .map_err(|_| NetError::CheckpointLength { offset })?;
            data.push(v);
        }
        weights.push(Matrix::from_vec(rows, cols, data)?);
    }
    let used = cur.position() as usize;
    if used != bytes.len() {
        return Err(NetError::CheckpointLength { offset: used });
    }

    let config: MlpConfig = serde_json::from_slice(&fs::read(sidecar_path(bin_path))?)?;
    if config.widths != widths {
        return Err(NetError::SidecarMismatch {
            header: widths,
            sidecar: config.widths,
        });
    }
    Mlp::from_parts(config, weights)
}

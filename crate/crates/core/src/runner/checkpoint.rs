//! Checkpoint file: magic `SFCK`, a version byte, the `u64` round, a
//! manifest of `(name, rows, cols)` entries, then every block in the linalg
//! matrix format in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::RunError;
use crate::diffgno::ScoreNet;
use crate::federation::GlobalModel;
use crate::linalg::{self, Matrix};
use crate::tasks::Blocks;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFCK";
pub const CHECKPOINT_VERSION: u8 = 1;

const THETA: &str = "kernel.theta_m";
const FEATURES: &str = "kernel.features";
const REST_PREFIX: &str = "rest.";
const NET: [&str; 4] = ["net.w1", "net.b1", "net.w2", "net.b2"];

fn format_err(path: &Path, msg: impl Into<String>) -> RunError {
    RunError::Checkpoint {
        path: path.display().to_string(),
        message: msg.into(),
    }
}

fn entries<'a>(model: &'a GlobalModel, net: &'a ScoreNet) -> Vec<(String, &'a Matrix)> {
    let mut out = vec![
        (THETA.to_string(), &model.theta_m),
        (FEATURES.to_string(), &model.features),
    ];
    out.extend(model.rest.iter().map(|(k, m)| (format!("{REST_PREFIX}{k}"), m)));
    out.extend(NET.iter().zip(net.blocks()).map(|(n, m)| (n.to_string(), m)));
    out
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(model: &GlobalModel, net: &ScoreNet, path: &Path) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    let io = |e: std::io::Error| RunError::Io {
        path: path.display().to_string(),
        source: e,
    };
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        let blocks = entries(model, net);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&[CHECKPOINT_VERSION]).map_err(io)?;
        w.write_all(&(model.round as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(blocks.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, m) in &blocks {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_all(&(m.rows() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(&(m.cols() as u32).to_le_bytes()).map_err(io)?;
        }
        for (_, m) in &blocks {
            linalg::write_matrix(&mut w, m).map_err(|e| format_err(path, e.to_string()))?;
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32, RunError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| format_err(path, "truncated header"))?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_checkpoint(path: &Path) -> Result<(GlobalModel, ScoreNet), RunError> {
    let file = File::open(path).map_err(|e| RunError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut r = BufReader::new(file);
    let mut head = [0u8; 13];
    r.read_exact(&mut head)
        .map_err(|_| format_err(path, "truncated header"))?;
    if &head[..4] != CHECKPOINT_MAGIC {
        return Err(format_err(path, "not a checkpoint (bad magic)"));
    }
    if head[4] != CHECKPOINT_VERSION {
        return Err(format_err(
            path,
            format!(
                "checkpoint version {} but this build reads version {}",
                head[4], CHECKPOINT_VERSION
            ),
        ));
    }
    let round = u64::from_le_bytes(head[5..13].try_into().expect("8 bytes")) as usize;
    let count = read_u32(&mut r, path)? as usize;
    if count > 1 << 16 {
        return Err(format_err(path, format!("implausible block count {count}")));
    }
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r, path)? as usize;
        if len > 1 << 12 {
            return Err(format_err(path, format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| format_err(path, "truncated manifest"))?;
        let name = String::from_utf8(name).map_err(|_| format_err(path, "block name is not UTF-8"))?;
        let rows = read_u32(&mut r, path)? as usize;
        let cols = read_u32(&mut r, path)? as usize;
        manifest.push((name, rows, cols));
    }
    let mut blocks = Blocks::new();
    for (name, rows, cols) in &manifest {
        let m = linalg::read_matrix(&mut r).map_err(|e| format_err(path, format!("block {name}: {e}")))?;
        if m.shape() != (*rows, *cols) {
            return Err(format_err(
                path,
                format!(
                    "block {name}: manifest says {rows}x{cols}, data is {}x{}",
                    m.rows(),
                    m.cols()
                ),
            ));
        }
        blocks.insert(name.clone(), m);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| RunError::Io {
        path: path.display().to_string(),
        source: e,
    })? != 0
    {
        return Err(format_err(path, "trailing bytes after the last block"));
    }

    let mut take = |name: &str| {
        blocks
            .remove(name)
            .ok_or_else(|| format_err(path, format!("missing block {name}")))
    };
    let theta_m = take(THETA)?;
    let features = take(FEATURES)?;
    let [w1, b1, w2, b2] = NET.map(&mut take);
    let net = ScoreNet::from_parts(w1?, b1?, w2?, b2?).map_err(|e| format_err(path, e.to_string()))?;
    let mut rest = Blocks::new();
    for (name, m) in blocks {
        match name.strip_prefix(REST_PREFIX) {
            Some(k) => rest.insert(k.to_string(), m),
            None => return Err(format_err(path, format!("unexpected block {name}"))),
        };
    }
    if !theta_m.is_square() || features.cols() != theta_m.rows() {
        return Err(format_err(
            path,
            format!(
                "kernel is {}x{} and features are {}x{}",
                theta_m.rows(),
                theta_m.cols(),
                features.rows(),
                features.cols()
            ),
        ));
    }
    let model = GlobalModel::from_parts(theta_m, rest, features, round).map_err(|e| format_err(path, e.to_string()))?;
    Ok((model, net))
}

/// Checks a loaded checkpoint against the shapes a config would build.
pub fn check_shapes(
    model: &GlobalModel,
    net: &ScoreNet,
    expected: &GlobalModel,
    expected_net: &ScoreNet,
) -> Result<(), RunError> {
    let mismatch = |what: &str, got: String, want: String| {
        Err(RunError::Checkpoint {
            path: what.into(),
            message: format!("checkpoint has {got}, config expects {want}"),
        })
    };
    if model.theta_m.shape() != expected.theta_m.shape() {
        return mismatch(
            "kernel.theta_m",
            format!("{:?}", model.theta_m.shape()),
            format!("{:?}", expected.theta_m.shape()),
        );
    }
    if model.features.shape() != expected.features.shape() {
        return mismatch(
            "kernel.features",
            format!("{:?}", model.features.shape()),
            format!("{:?}", expected.features.shape()),
        );
    }
    let names = |b: &Blocks| b.iter().map(|(k, m)| (k.clone(), m.shape())).collect::<Vec<_>>();
    if names(&model.rest) != names(&expected.rest) {
        return mismatch(
            "rest",
            format!("{:?}", names(&model.rest)),
            format!("{:?}", names(&expected.rest)),
        );
    }
    let shapes = |n: &ScoreNet| n.blocks().map(|m| m.shape());
    if shapes(net) != shapes(expected_net) {
        return mismatch(
            "net",
            format!("{:?}", shapes(net)),
            format!("{:?}", shapes(expected_net)),
        );
    }
    Ok(())
}

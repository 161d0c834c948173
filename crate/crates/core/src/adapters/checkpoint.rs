//! Adapter checkpoint directories: a key=value manifest plus per-layer A and
//! B tensors in the shared tensor format. Loading validates every shape
//! against the backend descriptor.

use std::collections::BTreeMap;
use std::path::Path;

use crate::lm::{tensor_io, BackendDescriptor};

use super::{AdapterError, AdapterKind, AdapterSet, LowRankAdapter};

const FORMAT: &str = "lordd-adapter-v1";

fn io_error(path: &Path, message: impl Into<String>) -> AdapterError {
    AdapterError::Io {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes `set` under `dir`. `extras` lands in the manifest verbatim; the
/// caller records the stack order and the training-config digest there.
pub fn save_adapter_set(
    dir: &Path,
    set: &AdapterSet,
    extras: &BTreeMap<String, String>,
) -> Result<(), AdapterError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e.to_string()))?;
    let mut manifest = String::new();
    manifest.push_str(&format!("format = {FORMAT}\n"));
    manifest.push_str(&format!("set = {}\n", set.kind()));
    manifest.push_str(&format!("rank = {}\n", set.rank()));
    manifest.push_str(&format!("alpha = {}\n", set.alpha()));
    manifest.push_str(&format!("init_std = {}\n", set.init_std()));
    manifest.push_str(&format!("layers = {}\n", set.layer_names().join(",")));
    for (key, value) in extras {
        manifest.push_str(&format!("{key} = {value}\n"));
    }
    let manifest_path = dir.join("manifest.txt");
    std::fs::write(&manifest_path, manifest).map_err(|e| io_error(&manifest_path, e.to_string()))?;
    for (name, adapter) in set.entries() {
        tensor_io::write_matrix(&dir.join(format!("{name}.a.bin")), adapter.a().view())?;
        tensor_io::write_matrix(&dir.join(format!("{name}.b.bin")), adapter.b().view())?;
    }
    Ok(())
}

/// Restores a set saved by [`save_adapter_set`], validating layer names and
/// dimensions against `descriptor`. The loaded set starts frozen. Returns the
/// manifest fields alongside it.
pub fn load_adapter_set(
    dir: &Path,
    descriptor: &BackendDescriptor,
) -> Result<(AdapterSet, BTreeMap<String, String>), AdapterError> {
    let manifest_path = dir.join("manifest.txt");
    let body = std::fs::read_to_string(&manifest_path)
        .map_err(|e| io_error(&manifest_path, e.to_string()))?;
    let fields: BTreeMap<String, String> = body
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect();
    let get = |key: &str| {
        fields
            .get(key)
            .ok_or_else(|| AdapterError::Manifest(format!("missing field {key}")))
    };
    if get("format")? != FORMAT {
        return Err(AdapterError::Manifest(format!(
            "unsupported format {:?}",
            fields.get("format")
        )));
    }
    let kind = AdapterKind::parse(get("set")?)?;
    let rank: usize = get("rank")?
        .parse()
        .map_err(|e| AdapterError::Manifest(format!("field rank: {e}")))?;
    let alpha: f64 = get("alpha")?
        .parse()
        .map_err(|e| AdapterError::Manifest(format!("field alpha: {e}")))?;
    let init_std: f64 = get("init_std")?
        .parse()
        .map_err(|e| AdapterError::Manifest(format!("field init_std: {e}")))?;
    let layers: Vec<String> = get("layers")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();

    let mut entries = Vec::with_capacity(layers.len());
    for name in layers {
        let spec = descriptor
            .linear(&name)
            .ok_or_else(|| AdapterError::UnknownLayer { layer: name.clone() })?;
        let a = tensor_io::read_matrix(&dir.join(format!("{name}.a.bin")))?;
        let b = tensor_io::read_matrix(&dir.join(format!("{name}.b.bin")))?;
        if a.dim() != (rank, spec.in_dim) || b.dim() != (spec.out_dim, rank) {
            return Err(AdapterError::DimMismatch {
                layer: name,
                expected: format!(
                    "A {}x{}, B {}x{}",
                    rank, spec.in_dim, spec.out_dim, rank
                ),
                got: format!(
                    "A {}x{}, B {}x{}",
                    a.nrows(),
                    a.ncols(),
                    b.nrows(),
                    b.ncols()
                ),
            });
        }
        entries.push((
            name,
            LowRankAdapter {
                a,
                b,
                rank,
                alpha,
                trainable: false,
            },
        ));
    }
    Ok((
        AdapterSet {
            kind,
            rank,
            alpha,
            init_std,
            entries,
        },
        fields,
    ))
}

//! Safetensors archives with a single JSON metadata entry.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::nn::{Module, Real};

/// Metadata key holding the JSON header.
pub const META_KEY: &str = "spoofbreak";

/// Serializes named f32 tensors plus `meta` into bytes. Output is a pure
/// function of the inputs.
pub fn to_bytes(tensors: &BTreeMap<String, ArrayD<f32>>, meta: &serde_json::Value) -> Result<Vec<u8>, String> {
    let raw: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
        .iter()
        .map(|(name, t)| {
            let bytes = t.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), bytes, t.shape().to_vec())
        })
        .collect();
    let views = raw
        .iter()
        .map(|(n, b, s)| TensorView::new(Dtype::F32, s.clone(), b).map(|v| (n.as_str(), v)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| format!("tensor view: {e:?}"))?;
    let info = HashMap::from([(META_KEY.to_string(), meta.to_string())]);
    safetensors::serialize(views, &Some(info)).map_err(|e| format!("serialize: {e:?}"))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(BTreeMap<String, ArrayD<f32>>, serde_json::Value), String> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| format!("corrupt archive: {e:?}"))?;
    let meta = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| "archive lacks metadata".to_string())?;
    let meta: serde_json::Value = serde_json::from_str(meta).map_err(|e| format!("metadata: {e}"))?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| format!("corrupt archive: {e:?}"))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(format!("tensor `{name}` has dtype {:?}, expected F32", view.dtype()));
        }
        let data: Vec<f32> = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), data).map_err(|e| format!("tensor `{name}`: {e}"))?;
        out.insert(name, arr);
    }
    Ok((out, meta))
}

pub fn write(path: &Path, tensors: &BTreeMap<String, ArrayD<f32>>, meta: &serde_json::Value) -> Result<(), String> {
    let bytes = to_bytes(tensors, meta)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    }
    std::fs::write(path, bytes).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn read(path: &Path) -> Result<(BTreeMap<String, ArrayD<f32>>, serde_json::Value), String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    from_bytes(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

/// Collects every parameter and buffer of `module` under `prefix`.
pub fn collect<T: Real, M: Module<T> + ?Sized>(module: &M, prefix: &str, out: &mut BTreeMap<String, ArrayD<f32>>) {
    for (name, t) in module.named_tensors(prefix) {
        out.insert(name, t.mapv(|v| v.to_f64_lossy() as f32));
    }
}

/// Restores `module` from tensors stored under `prefix`.
pub fn restore<T: Real, M: Module<T> + ?Sized>(
    module: &mut M,
    prefix: &str,
    tensors: &BTreeMap<String, ArrayD<f32>>,
) -> Result<(), String> {
    module.load_named(prefix, &mut |name| tensors.get(name).map(|t| t.mapv(|v| T::lit(v as f64))))
}

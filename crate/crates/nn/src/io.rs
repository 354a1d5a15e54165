//! Weight persistence in the safetensors format.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::{DType, Float};
use crate::tensor::Tensor;

fn st_dtype(d: DType) -> Dtype {
    match d {
        DType::F32 => Dtype::F32,
        DType::F64 => Dtype::F64,
    }
}

/// Serialises every entry (trainable and buffers) under its name.
pub fn to_bytes<T: Float>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let raw: Vec<(String, [usize; 4], Vec<u8>)> = store
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.value.shape(), T::to_le_bytes_vec(e.value.data())))
        .collect();
    let views = raw
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(st_dtype(T::DTYPE), shape.to_vec(), bytes).map(|v| (name.clone(), v))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(safetensors::tensor::serialize(views, &None)?)
}

pub fn save<T: Float>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(store)?;
    std::fs::write(path, bytes).map_err(|source| Error::Io { path: path.into(), source })
}

fn decode<T: Float>(view: &TensorView<'_>) -> Result<Vec<T>> {
    let bytes = view.data();
    Ok(match view.dtype() {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect(),
        other => return Err(Error::DType(format!("{other:?}"))),
    })
}

/// Overwrites every entry of `store` from `bytes`. Names and shapes must
/// match exactly; values are converted to `T`.
pub fn load_into<T: Float>(store: &mut ParamStore<T>, bytes: &[u8]) -> Result<()> {
    let st = SafeTensors::deserialize(bytes)?;
    let mut found: HashMap<String, TensorView<'_>> = st.tensors().into_iter().collect();
    let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
    for name in names {
        let view = found.remove(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        let shape: [usize; 4] = view
            .shape()
            .try_into()
            .map_err(|_| Error::Shape(format!("`{name}` is not 4-D: {:?}", view.shape())))?;
        store.set(&name, Tensor::from_vec(shape, decode(&view)?)?)?;
    }
    if let Some(extra) = found.keys().next() {
        return Err(Error::MissingParam(format!("{extra} (present in file but not in model)")));
    }
    Ok(())
}

/// Overwrites only the entries whose names start with `prefix`; each of them
/// must be present in `bytes`. Other tensors in the file are ignored.
pub fn load_prefix_into<T: Float>(store: &mut ParamStore<T>, bytes: &[u8], prefix: &str) -> Result<usize> {
    let st = SafeTensors::deserialize(bytes)?;
    let names: Vec<String> =
        store.entries().iter().filter(|e| e.name.starts_with(prefix)).map(|e| e.name.clone()).collect();
    for name in &names {
        let view = st.tensor(name).map_err(|_| Error::MissingParam(name.clone()))?;
        let shape: [usize; 4] = view
            .shape()
            .try_into()
            .map_err(|_| Error::Shape(format!("`{name}` is not 4-D: {:?}", view.shape())))?;
        store.set(name, Tensor::from_vec(shape, decode(&view)?)?)?;
    }
    Ok(names.len())
}

pub fn load<T: Float>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io { path: path.into(), source })?;
    load_into(store, &bytes)
}

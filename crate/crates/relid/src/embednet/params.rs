//! Named parameter tensors and their checkpoint format.
//!
//! A ParamSet is an insertion-ordered table of named 2-D tensors. The
//! order is load-bearing: gradient vectors, optimizer state, and
//! checkpoint files all follow it.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use ndarray::Array2;

use crate::embednet::graph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::io::{self, dim_u32};

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn insert(&mut self, name: &str, tensor: Array2<f64>) -> Result<()> {
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::invalid("ParamSet", "parameter name length out of range"));
        }
        if self.index.contains_key(name) {
            return Err(Error::invalid(
                "ParamSet",
                format!("duplicate parameter {name:?}"),
            ));
        }
        if tensor.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "ParamSet",
                format!("parameter {name:?} holds non-finite values"),
            ));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::invalid("ParamSet", format!("unknown parameter {name:?}")))
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("ParamSet", format!("unknown parameter {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter())
    }

    pub fn tensor(&self, i: usize) -> &Array2<f64> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Array2<f64> {
        &mut self.tensors[i]
    }

    pub fn set(&mut self, name: &str, tensor: Array2<f64>) -> Result<()> {
        let i = self.position(name)?;
        if self.tensors[i].dim() != tensor.dim() {
            return Err(Error::shape(
                "ParamSet",
                format!(
                    "replacing {name:?}: {:?} with {:?}",
                    self.tensors[i].dim(),
                    tensor.dim()
                ),
            ));
        }
        self.tensors[i] = tensor;
        Ok(())
    }

    /// Copies every tensor of `other` under `prefix` + its name; used to
    /// merge separately trained sub-networks into one joint set.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamSet) -> Result<()> {
        for (name, tensor) in other.iter() {
            self.insert(&format!("{prefix}{name}"), tensor.clone())?;
        }
        Ok(())
    }

    /// Extracts the tensors whose names start with `prefix`, stripping it.
    pub fn split_prefixed(&self, prefix: &str) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, tensor) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, tensor.clone())?;
            }
        }
        if out.is_empty() {
            return Err(Error::invalid(
                "ParamSet",
                format!("no parameters under prefix {prefix:?}"),
            ));
        }
        Ok(out)
    }
}

/// Parameter leaves bound into a graph, addressable by name.
#[derive(Debug)]
pub struct Binding {
    ids: Vec<NodeId>,
    index: HashMap<String, usize>,
}

/// Creates one leaf per parameter, in ParamSet order.
pub fn bind(g: &mut Graph, params: &ParamSet) -> Result<Binding> {
    let mut ids = Vec::with_capacity(params.len());
    let mut index = HashMap::new();
    for (i, (name, tensor)) in params.iter().enumerate() {
        ids.push(g.leaf(tensor.clone())?);
        index.insert(name.to_string(), i);
    }
    Ok(Binding { ids, index })
}

impl Binding {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.index
            .get(name)
            .map(|&i| self.ids[i])
            .ok_or_else(|| Error::invalid("Binding", format!("unbound parameter {name:?}")))
    }

    /// Gradients after a backward pass, in ParamSet order.
    pub fn grads(&self, g: &Graph) -> Vec<Array2<f64>> {
        self.ids.iter().map(|&id| g.grad(id).to_owned()).collect()
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RNET";

/// Writes a named-tensor checkpoint: count, then per tensor the name
/// (u16 length + UTF-8 bytes), rows, cols, and row-major f32 values.
pub fn write_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    io::write_magic(&mut w, CHECKPOINT_MAGIC)?;
    w.write_u32::<LE>(dim_u32(params.len(), "tensor count", path)?)?;
    for (name, tensor) in params.iter() {
        w.write_u16::<LE>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LE>(dim_u32(tensor.nrows(), "rows", path)?)?;
        w.write_u32::<LE>(dim_u32(tensor.ncols(), "cols", path)?)?;
        io::write_matrix_f32(&mut w, tensor)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ParamSet> {
    let mut r = BufReader::new(File::open(path)?);
    io::check_magic(&mut r, CHECKPOINT_MAGIC, path)?;
    let count = r
        .read_u32::<LE>()
        .map_err(|_| Error::bad_file(path, "truncated tensor count"))? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r
            .read_u16::<LE>()
            .map_err(|_| Error::bad_file(path, "truncated name length"))? as usize;
        let mut buf = vec![0u8; name_len];
        r.read_exact(&mut buf)
            .map_err(|_| Error::bad_file(path, "truncated name"))?;
        let name = String::from_utf8(buf)
            .map_err(|_| Error::bad_file(path, "parameter name is not UTF-8"))?;
        let rows = r
            .read_u32::<LE>()
            .map_err(|_| Error::bad_file(path, "truncated shape"))? as usize;
        let cols = r
            .read_u32::<LE>()
            .map_err(|_| Error::bad_file(path, "truncated shape"))? as usize;
        let tensor = io::read_matrix_f32(&mut r, rows, cols, path)?;
        params.insert(&name, tensor)?;
    }
    io::expect_eof(&mut r, path)?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn insertion_order_is_stable() {
        let mut ps = ParamSet::new();
        ps.insert("b", array![[1.0]]).unwrap();
        ps.insert("a", array![[2.0]]).unwrap();
        let names: Vec<&str> = ps.names().collect();
        assert_eq!(names, vec!["b", "a"]);
        assert!(ps.insert("a", array![[3.0]]).is_err(), "duplicate name");
    }

    #[test]
    fn binding_gradients_follow_param_order() {
        let mut ps = ParamSet::new();
        ps.insert("w", array![[2.0]]).unwrap();
        ps.insert("v", array![[5.0]]).unwrap();
        let mut g = Graph::new();
        let bd = bind(&mut g, &ps).unwrap();
        let w = bd.id("w").unwrap();
        let v = bd.id("v").unwrap();
        // loss = w * v: dw = v = 5, dv = w = 2.
        let prod = g.mul(w, v).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        let grads = bd.grads(&g);
        assert_eq!(grads[0][[0, 0]], 5.0);
        assert_eq!(grads[1][[0, 0]], 2.0);
        assert!(bd.id("nope").is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_names_order_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::new();
        ps.insert("layer1.w", array![[0.5, -1.25], [3.0, 0.0]]).unwrap();
        ps.insert("layer1.b", array![[0.125, 2.0]]).unwrap();
        let path = dir.path().join("model.rnet");
        write_checkpoint(&path, &ps).unwrap();
        let back = read_checkpoint(&path).unwrap();
        let names: Vec<&str> = back.names().collect();
        assert_eq!(names, vec!["layer1.w", "layer1.b"]);
        // All sample values are exactly representable in f32.
        assert_eq!(back.get("layer1.w").unwrap(), ps.get("layer1.w").unwrap());
        assert_eq!(back.get("layer1.b").unwrap(), ps.get("layer1.b").unwrap());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::new();
        ps.insert("w", array![[1.0]]).unwrap();
        let path = dir.path().join("model.rnet");
        write_checkpoint(&path, &ps).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Truncated file.
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_checkpoint(&path).is_err());
        // Trailing junk.
        let mut extended = bytes.clone();
        extended.push(0);
        std::fs::write(&path, &extended).unwrap();
        assert!(read_checkpoint(&path).is_err());
    }

    #[test]
    fn merge_and_split_round_trip() {
        let mut trunk = ParamSet::new();
        trunk.insert("w", array![[1.0]]).unwrap();
        let mut joint = ParamSet::new();
        joint.merge_prefixed("xv.", &trunk).unwrap();
        joint.insert("seq.w", array![[2.0]]).unwrap();
        let back = joint.split_prefixed("xv.").unwrap();
        assert_eq!(back.get("w").unwrap(), trunk.get("w").unwrap());
        assert!(joint.split_prefixed("zz.").is_err());
    }
}

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

/// Magic line opening a checkpoint file.
pub const CHECKPOINT_HEADER: &str = "scenecast-checkpoint v1";

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, grad: None });
        ParamId(id)
    }

    /// Uniform init in ±sqrt(1/fan_in).
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape/numel agree"))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => {
                let t = Tensor::new(p.value.shape().to_vec(), grad.to_vec()).expect("grad shape");
                p.grad = Some(t);
            }
        }
    }

    /// Multiplies every populated gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Writes a header line then one JSON record per parameter, in insertion order.
    pub fn write_checkpoint<W: Write>(&self, w: W) -> Result<()> {
        self.write_checkpoint_with_meta(w, &serde_json::Value::Object(Default::default()))
    }

    /// Checkpoint layout: header line, one JSON metadata line, then one
    /// `{"name","shape","values"}` record per parameter.
    pub fn write_checkpoint_with_meta<W: Write>(&self, mut w: W, meta: &serde_json::Value) -> Result<()> {
        writeln!(w, "{CHECKPOINT_HEADER}")?;
        serde_json::to_writer(&mut w, meta)?;
        writeln!(w)?;
        for p in &self.params {
            let entry = CheckpointEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.data().to_vec(),
            };
            serde_json::to_writer(&mut w, &entry)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        Ok(Self::read_checkpoint_with_meta(r)?.0)
    }

    pub fn read_checkpoint_with_meta<R: BufRead>(r: R) -> Result<(Self, serde_json::Value)> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == CHECKPOINT_HEADER => {}
            Some(Ok(h)) => return Err(Error::Format(format!("bad checkpoint header `{h}`"))),
            Some(Err(e)) => return Err(e.into()),
            None => return Err(Error::Format("empty checkpoint".into())),
        }
        let meta: serde_json::Value = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::Format("checkpoint lacks metadata line".into())),
        };
        let mut set = ParamSet::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: CheckpointEntry = serde_json::from_str(&line)?;
            if set.index.contains_key(&e.name) {
                return Err(Error::Format(format!("duplicate parameter `{}`", e.name)));
            }
            set.add(e.name, Tensor::new(e.shape, e.values)?);
        }
        Ok((set, meta))
    }

    /// Copies values from `other` into parameters of the same name and shape.
    pub fn load_values(&mut self, other: &ParamSet) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .index
                .get(&p.name)
                .map(|&i| &other.params[i])
                .ok_or_else(|| Error::UnknownParam(p.name.clone()))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "load_values",
                    left: p.value.shape().to_vec(),
                    right: src.value.shape().to_vec(),
                });
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new();
        ps.add_uniform("a.w", &[3, 4], 3, &mut rng);
        ps.add_uniform("a.b", &[4], 3, &mut rng);
        let mut buf = Vec::new();
        ps.write_checkpoint(&mut buf).unwrap();
        let back = ParamSet::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        for ((_, a), (_, b)) in ps.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let id = ps.add_uniform("w", &[16, 8], 16, &mut rng);
        assert!(ps.value(id).data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn rejects_bad_header() {
        assert!(ParamSet::read_checkpoint(&b"nope\n"[..]).is_err());
    }
}

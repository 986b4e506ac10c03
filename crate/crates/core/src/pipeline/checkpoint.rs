//! Self-describing checkpoint: magic, version, config fingerprint, model
//! architecture, step counter, a name-table of little-endian tensors and the
//! optimizer moments.
//!
//! Tensors are stored at full f64 width so that abort-and-resume replays a
//! run bit-exactly.

use std::fs;
use std::path::Path;

use crate::errors::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{AdamW, OptimizerState, ParamStore};
use crate::{Real, Tensor};

const MAGIC: &[u8; 4] = b"SSCK";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub struct Checkpoint {
    pub fingerprint: String,
    pub model: ModelConfig,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState<Real>>,
}

fn push_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Malformed {
                what: self.what.clone(),
                detail: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Malformed {
            what: self.what.clone(),
            detail: "non-utf8 string".into(),
        })
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Checkpoint {
    pub fn from_store(
        fingerprint: &str,
        model: &ModelConfig,
        step: u64,
        store: &ParamStore<Real>,
        opt: Option<&AdamW<Real>>,
    ) -> Self {
        Checkpoint {
            fingerprint: fingerprint.to_string(),
            model: model.clone(),
            step,
            tensors: store
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            optimizer: opt.map(|o| o.export_state()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        push_bytes(&mut out, self.fingerprint.as_bytes());
        let model_json = serde_json::to_string(&self.model).expect("model config serializes");
        push_bytes(&mut out, model_json.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            push_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.optimizer {
            None => out.push(0),
            Some(state) => {
                out.push(1);
                for ((m, v), &t) in state
                    .first_moments
                    .iter()
                    .zip(&state.second_moments)
                    .zip(&state.step_counts)
                {
                    for &x in m {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                    for &x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                    out.extend_from_slice(&t.to_le_bytes());
                }
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
            what: format!("checkpoint {}", path.display()),
        };
        let bad = |detail: &str| Error::Malformed {
            what: format!("checkpoint {}", path.display()),
            detail: detail.into(),
        };
        if r.take(4)? != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let fingerprint = r.string()?;
        let model_json = r.string()?;
        let model: ModelConfig =
            serde_json::from_str(&model_json).map_err(|e| bad(&format!("model config: {e}")))?;
        let step = r.u64()?;
        if r.u8()? != DTYPE_F64 {
            return Err(bad("unsupported dtype"));
        }
        let n = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            shapes.push((name, dims));
        }
        let mut tensors = Vec::with_capacity(n);
        for (name, dims) in shapes {
            let numel: usize = dims.iter().product();
            let data = r.f64s(numel)?;
            tensors.push((name, Tensor::new(dims, data)?));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let mut first = Vec::with_capacity(n);
                let mut second = Vec::with_capacity(n);
                let mut counts = Vec::with_capacity(n);
                for (_, t) in &tensors {
                    first.push(r.f64s(t.numel())?);
                    second.push(r.f64s(t.numel())?);
                    counts.push(r.u64()?);
                }
                Some(OptimizerState {
                    first_moments: first,
                    second_moments: second,
                    step_counts: counts,
                })
            }
            t => return Err(bad(&format!("unknown optimizer flag {t}"))),
        };
        if !tensors.iter().all(|(_, t)| t.all_finite()) {
            return Err(bad("non-finite tensor values"));
        }
        Ok(Checkpoint {
            fingerprint,
            model,
            step,
            tensors,
            optimizer,
        })
    }

    pub fn verify_fingerprint(&self, expected: &str, force: bool) -> Result<()> {
        if !force && self.fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                expected: expected.to_string(),
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Restore every parameter of `store` (names and shapes must all match)
    /// plus the optimizer moments.
    pub fn restore_full(&self, store: &mut ParamStore<Real>, opt: &mut AdamW<Real>) -> Result<()> {
        self.copy_params(store, &|_| true, true)?;
        if let Some(state) = &self.optimizer {
            let cloned = OptimizerState {
                first_moments: state.first_moments.clone(),
                second_moments: state.second_moments.clone(),
                step_counts: state.step_counts.clone(),
            };
            opt.import_state(cloned);
        }
        Ok(())
    }

    /// Restore every store parameter without touching optimizer state.
    pub fn restore_all(&self, store: &mut ParamStore<Real>) -> Result<()> {
        self.copy_params(store, &|_| true, true)
    }

    /// Restore only the base model (frontend, projection, encoder), the part
    /// fine-tuning keeps; prediction heads and the mask embedding are
    /// dropped.
    pub fn restore_base(&self, store: &mut ParamStore<Real>) -> Result<()> {
        self.copy_params(
            store,
            &|name| {
                name.starts_with("frontend.")
                    || name.starts_with("proj.")
                    || name.starts_with("encoder.")
            },
            false,
        )
    }

    fn copy_params(
        &self,
        store: &mut ParamStore<Real>,
        wanted: &dyn Fn(&str) -> bool,
        require_exact_set: bool,
    ) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            if !wanted(name) {
                continue;
            }
            let Some(t) = self.tensor(name) else {
                return Err(Error::Malformed {
                    what: "checkpoint".into(),
                    detail: format!("missing tensor {name:?}"),
                });
            };
            let dst = store.get_mut(name);
            if dst.shape() != t.shape() {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    expected: dst.shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
            *dst = t.clone();
        }
        if require_exact_set {
            for (name, _) in &self.tensors {
                if !store.contains(name) {
                    return Err(Error::Malformed {
                        what: "checkpoint".into(),
                        detail: format!("unexpected tensor {name:?} for this configuration"),
                    });
                }
            }
        }
        Ok(())
    }
}

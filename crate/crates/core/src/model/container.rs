//! Checkpoint container: an 8-byte little-endian header length, a UTF-8 JSON
//! header describing the payload, then little-endian f32 blobs in header
//! order. Models, prompts, banks, low-rank adapters, and prefix sets all
//! share this one format; the header's `kind` field says which.

use crate::adapters::{LoraAdapter, LoraLayer, LoraPair, PrefixSet, PromptBank, PromptMeta, SoftPrompt};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Weights};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// byte offset from the start of the blob section
    pub offset: u64,
    /// element count
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_container(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    tensors: &[(String, &Tensor<f32>)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            len: t.len() as u64,
        });
        offset += (t.len() * 4) as u64;
    }
    let header = ContainerHeader {
        kind: kind.to_string(),
        meta,
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, t) in tensors {
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<(ContainerHeader, BTreeMap<String, Tensor<f32>>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: ContainerHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::BadContainer(format!("header: {e}")))?;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        if entry.dtype != "f32" {
            return Err(Error::BadContainer(format!(
                "tensor {} has dtype {}",
                entry.name, entry.dtype
            )));
        }
        let start = entry.offset as usize;
        let bytes = entry.len as usize * 4;
        if start + bytes > blob.len() {
            return Err(Error::BadContainer(format!(
                "tensor {} overruns the blob section",
                entry.name
            )));
        }
        let expect: usize = entry.shape.iter().product();
        if expect != entry.len as usize {
            return Err(Error::BadContainer(format!(
                "tensor {} shape/len mismatch",
                entry.name
            )));
        }
        let data: Vec<f32> = blob[start..start + bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    Ok((header, tensors))
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let names = model.weights.param_names();
    let tensors: Vec<(String, &Tensor<f32>)> = names
        .iter()
        .map(|n| (n.clone(), model.weights.get(n).expect("name from list")))
        .collect();
    save_container(path, "model", serde_json::to_value(model.config)?, &tensors)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let (header, mut tensors) = load_container(path)?;
    if header.kind != "model" {
        return Err(Error::BadContainer(format!(
            "expected a model container, found {:?}",
            header.kind
        )));
    }
    let config: ModelConfig = serde_json::from_value(header.meta)
        .map_err(|e| Error::BadContainer(format!("model meta: {e}")))?;
    let mut weights = Weights::<f32>::init(&config)?;
    for name in weights.param_names() {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::BadContainer(format!("missing tensor {name}")))?;
        let slot = weights.get_mut(&name).expect("name from list");
        if slot.shape() != t.shape() {
            return Err(Error::BadContainer(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(Model { config, weights })
}

#[derive(Debug, Serialize, Deserialize)]
struct PromptEntryMeta {
    id: String,
    #[serde(flatten)]
    meta: PromptMeta,
}

pub fn save_bank(path: &Path, bank: &PromptBank) -> Result<()> {
    let metas: Vec<PromptEntryMeta> = bank
        .prompts()
        .iter()
        .map(|p| PromptEntryMeta {
            id: p.id.clone(),
            meta: p.meta.clone(),
        })
        .collect();
    let tensors: Vec<(String, &Tensor<f32>)> = bank
        .prompts()
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("prompt.{i}"), &p.embedding))
        .collect();
    save_container(path, "prompt-bank", serde_json::to_value(metas)?, &tensors)
}

pub fn load_bank(path: &Path) -> Result<PromptBank> {
    let (header, tensors) = load_container(path)?;
    if header.kind != "prompt-bank" {
        return Err(Error::BadContainer(format!(
            "expected a prompt-bank container, found {:?}",
            header.kind
        )));
    }
    let metas: Vec<PromptEntryMeta> = serde_json::from_value(header.meta)
        .map_err(|e| Error::BadContainer(format!("bank meta: {e}")))?;
    let mut prompts = Vec::with_capacity(metas.len());
    for (i, m) in metas.into_iter().enumerate() {
        let t = tensors
            .get(&format!("prompt.{i}"))
            .ok_or_else(|| Error::BadContainer(format!("missing tensor prompt.{i}")))?;
        prompts.push(SoftPrompt {
            id: m.id,
            embedding: t.clone(),
            meta: m.meta,
        });
    }
    PromptBank::new(prompts)
}

pub fn save_prompt(path: &Path, prompt: &SoftPrompt) -> Result<()> {
    let meta = PromptEntryMeta {
        id: prompt.id.clone(),
        meta: prompt.meta.clone(),
    };
    save_container(
        path,
        "prompt",
        serde_json::to_value(meta)?,
        &[("prompt".to_string(), &prompt.embedding)],
    )
}

pub fn load_prompt(path: &Path) -> Result<SoftPrompt> {
    let (header, tensors) = load_container(path)?;
    if header.kind != "prompt" {
        return Err(Error::BadContainer(format!(
            "expected a prompt container, found {:?}",
            header.kind
        )));
    }
    let m: PromptEntryMeta = serde_json::from_value(header.meta)
        .map_err(|e| Error::BadContainer(format!("prompt meta: {e}")))?;
    let t = tensors
        .get("prompt")
        .ok_or_else(|| Error::BadContainer("missing tensor prompt".into()))?;
    Ok(SoftPrompt {
        id: m.id,
        embedding: t.clone(),
        meta: m.meta,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct LoraMeta {
    rank: usize,
    n_layers: usize,
}

const LORA_TARGETS: [&str; 6] = ["q", "k", "v", "o", "up", "down"];

pub fn save_lora(path: &Path, adapter: &LoraAdapter<f32>) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
    for (li, l) in adapter.layers.iter().enumerate() {
        for (t, pair) in LORA_TARGETS
            .iter()
            .zip([&l.q, &l.k, &l.v, &l.o, &l.up, &l.down])
        {
            tensors.push((format!("lora.{li}.{t}.a"), &pair.a));
            tensors.push((format!("lora.{li}.{t}.b"), &pair.b));
        }
    }
    let meta = LoraMeta {
        rank: adapter.rank,
        n_layers: adapter.layers.len(),
    };
    save_container(path, "lora", serde_json::to_value(meta)?, &tensors)
}

pub fn load_lora(path: &Path) -> Result<LoraAdapter<f32>> {
    let (header, tensors) = load_container(path)?;
    if header.kind != "lora" {
        return Err(Error::BadContainer(format!(
            "expected a lora container, found {:?}",
            header.kind
        )));
    }
    let meta: LoraMeta = serde_json::from_value(header.meta)
        .map_err(|e| Error::BadContainer(format!("lora meta: {e}")))?;
    let fetch = |name: String| -> Result<Tensor<f32>> {
        tensors
            .get(&name)
            .cloned()
            .ok_or_else(|| Error::BadContainer(format!("missing tensor {name}")))
    };
    let mut layers = Vec::with_capacity(meta.n_layers);
    for li in 0..meta.n_layers {
        let mut pairs = Vec::with_capacity(6);
        for t in LORA_TARGETS {
            pairs.push(LoraPair {
                a: fetch(format!("lora.{li}.{t}.a"))?,
                b: fetch(format!("lora.{li}.{t}.b"))?,
            });
        }
        let mut it = pairs.into_iter();
        layers.push(LoraLayer {
            q: it.next().unwrap(),
            k: it.next().unwrap(),
            v: it.next().unwrap(),
            o: it.next().unwrap(),
            up: it.next().unwrap(),
            down: it.next().unwrap(),
        });
    }
    Ok(LoraAdapter {
        rank: meta.rank,
        layers,
    })
}

pub fn save_prefix(path: &Path, prefix: &PrefixSet<f32>) -> Result<()> {
    let tensors: Vec<(String, &Tensor<f32>)> = prefix
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| (format!("prefix.{i}"), b))
        .collect();
    let meta = serde_json::json!({ "n_layers": prefix.blocks.len(), "t": prefix.t() });
    save_container(path, "prefix", meta, &tensors)
}

pub fn load_prefix(path: &Path) -> Result<PrefixSet<f32>> {
    let (header, tensors) = load_container(path)?;
    if header.kind != "prefix" {
        return Err(Error::BadContainer(format!(
            "expected a prefix container, found {:?}",
            header.kind
        )));
    }
    let n = header.meta["n_layers"]
        .as_u64()
        .ok_or_else(|| Error::BadContainer("prefix meta missing n_layers".into()))?;
    let mut blocks = Vec::with_capacity(n as usize);
    for i in 0..n {
        blocks.push(
            tensors
                .get(&format!("prefix.{i}"))
                .cloned()
                .ok_or_else(|| Error::BadContainer(format!("missing tensor prefix.{i}")))?,
        );
    }
    Ok(PrefixSet { blocks })
}

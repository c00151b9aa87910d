//! Little-endian checkpoint files.
//!
//! ```text
//! "BNLU" | u32 version | u32 len, config text
//! 3 × (u32 count, count × (u32 len, utf-8))     tokens, slots, intents
//! u32 records | records × (u32 len, name, u32 rank, rank × u32 dim, f32 payload)
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::config::RunConfig;
use crate::corpus::{VocabKind, Vocabs, Vocabulary};
use crate::error::{Error, Result};
use crate::model::JointModel;
use crate::numcore::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BNLU";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocabs: Vocabs,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    /// The model described by the header, checked against the stored arrays.
    pub fn model(&self) -> Result<JointModel> {
        let model = JointModel::new(self.config.model_config(&self.vocabs))?;
        model.check_params(&self.params)?;
        Ok(model)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LittleEndian>(s.len() as u32).expect("vec write");
    out.extend_from_slice(s.as_bytes());
}

pub fn save_checkpoint(path: &Path, config: &RunConfig, vocabs: &Vocabs, params: &ParamStore<f32>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).expect("vec write");
    put_str(&mut out, &config.to_text());
    for v in [&vocabs.tokens, &vocabs.slots, &vocabs.intents] {
        out.write_u32::<LittleEndian>(v.len() as u32).expect("vec write");
        for item in v.items() {
            put_str(&mut out, item);
        }
    }
    out.write_u32::<LittleEndian>(params.len() as u32).expect("vec write");
    for (name, t) in params.iter() {
        put_str(&mut out, name);
        out.write_u32::<LittleEndian>(t.rank() as u32).expect("vec write");
        for &d in t.dims() {
            out.write_u32::<LittleEndian>(d as u32).expect("vec write");
        }
        for &x in t.data() {
            out.write_f32::<LittleEndian>(x).expect("vec write");
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn truncated(what: &str) -> Error {
        Error::Corrupt(format!("file ends inside {what}"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.cur.read_u32::<LittleEndian>().map_err(|_| Self::truncated(what))
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let left = self.cur.get_ref().len() as u64 - self.cur.position();
        if (n as u64) > left {
            return Err(Self::truncated(what));
        }
        let mut buf = vec![0u8; n];
        self.cur.read_exact(&mut buf).map_err(|_| Self::truncated(what))?;
        Ok(buf)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.bytes(n, what)?).map_err(|_| Error::Corrupt(format!("{what} is not UTF-8")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        cur: Cursor::new(raw.as_slice()),
    };
    if r.bytes(4, "magic").ok().as_deref() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Corrupt(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Corrupt(format!(
            "format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let config =
        RunConfig::parse(&r.string("config block")?).map_err(|e| Error::Corrupt(format!("config block: {e}")))?;
    let mut vocab = |kind: VocabKind| -> Result<Vocabulary> {
        let n = r.u32("vocabulary")? as usize;
        let items = (0..n).map(|_| r.string("vocabulary")).collect::<Result<Vec<_>>>()?;
        Vocabulary::from_items(kind, items)
    };
    let vocabs = Vocabs {
        tokens: vocab(VocabKind::Token)?,
        slots: vocab(VocabKind::Slot)?,
        intents: vocab(VocabKind::Intent)?,
    };
    let records = r.u32("record count")?;
    let mut params = ParamStore::new();
    for _ in 0..records {
        let name = r.string("record name")?;
        let rank = r.u32(&name)? as usize;
        let dims = (0..rank)
            .map(|_| Ok(r.u32(&name)? as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Corrupt(format!("{name}: dims {dims:?} overflow")))?;
        let bytes = r.bytes(n.saturating_mul(4), &name)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params
            .add(name, Tensor::new(dims, data)?)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
    }
    if r.cur.position() != raw.len() as u64 {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes",
            raw.len() as u64 - r.cur.position()
        )));
    }
    Ok(Checkpoint { config, vocabs, params })
}

//! `ABCK` checkpoint container for [`TrainState`].
//!
//! Little-endian, same conventions as the model file:
//!
//! ```text
//! "ABCK" | u32 version=1 | u8 phase | u8 flags=0 | u16 reserved=0 | u64 step
//! u32 spec_len | spec text (UTF-8)
//! u32 n_blocks | f64 beta[n_blocks]
//! u32 n_params | per param: u8 kind | u32 rows | u32 name_len | name
//!                           | u32 len | f64 values[len] | f64 m[len] | f64 v[len]
//! u32 crc32 (IEEE) over all preceding bytes
//! ```

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::nfgraph::network::{Moments, Param, ParamKind, Phase, TrainState};
use crate::nfgraph::GraphSpec;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ABCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u8(state.phase.as_u8());
    w.u8(0);
    w.u16(0);
    w.u64(state.step);
    let text = state.spec.to_text();
    w.len32(text.len())?;
    w.bytes(text.as_bytes());
    w.len32(state.betas.len())?;
    w.f64s(&state.betas);
    w.len32(state.params.len())?;
    for (p, m) in state.params.iter().zip(&state.moments) {
        w.u8(p.kind.tag());
        w.len32(p.rows)?;
        w.len32(p.name.len())?;
        w.bytes(p.name.as_bytes());
        w.len32(p.values.len())?;
        w.f64s(&p.values);
        w.f64s(&m.m);
        w.f64s(&m.v);
    }
    Ok(w.finish())
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.format_err("bad magic, expected ABCK"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.format_err(format!("unsupported checkpoint version {version}")));
    }
    let phase = match r.u8()? {
        1 => Phase::Step1,
        2 => Phase::Step2,
        p => return Err(r.format_err(format!("unknown phase {p}"))),
    };
    let _flags = r.u8()?;
    let _reserved = r.u16()?;
    let step = r.u64()?;
    r.enter("graph spec");
    let n = r.usize32()?;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| r.format_err("spec text is not UTF-8"))?;
    let spec = GraphSpec::parse(text).map_err(|e| Error::format("graph spec", e.to_string()))?;
    r.enter("betas");
    let nb = r.usize32()?;
    let betas = r.f64s(nb)?;
    r.enter("parameters");
    let np = r.usize32()?;
    let mut params = Vec::new();
    let mut moments = Vec::new();
    for i in 0..np {
        r.enter(format!("parameter {i}"));
        let kind = ParamKind::from_tag(r.u8()?).ok_or_else(|| r.format_err("unknown parameter kind"))?;
        let rows = r.usize32()?;
        let name_len = r.usize32()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.format_err("name is not UTF-8"))?;
        r.enter(format!("parameter `{name}`"));
        let len = r.usize32()?;
        let values = r.f64s(len)?;
        let m = r.f64s(len)?;
        let v = r.f64s(len)?;
        params.push(Param { name, kind, rows, values });
        moments.push(Moments { m, v });
    }
    r.finish()?;
    let state = TrainState {
        spec: spec.clone(),
        phase,
        params,
        moments,
        betas,
        step,
    };
    state.check_against(&spec)?;
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let bytes = checkpoint_to_bytes(state)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// Load a checkpoint and require that it was produced for `spec`
/// (tensor names, kinds and shapes compared one by one).
pub fn load_checkpoint_for(path: impl AsRef<Path>, spec: &GraphSpec) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    state.check_against(spec)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPEC: &str = "
        input c=1 h=4 w=4
        first_conv c_in=1 c_out=2 k=3 pad=1
        block_begin
        masked_sign channels=2
        bin_conv c_in=2 c_out=2 k=3 pad=1
        qrprelu channels=2
        block_end
        flatten
        last_dense n_in=32 n_out=2
    ";

    #[test]
    fn roundtrip_is_exact() {
        let spec = GraphSpec::parse(SPEC).unwrap();
        let mut s = TrainState::init(&spec, 5).unwrap();
        s.step = 17;
        s.phase = Phase::Step2;
        s.moments[0].m[0] = 0.5;
        let bytes = checkpoint_to_bytes(&s).unwrap();
        assert_eq!(&bytes[..4], b"ABCK");
        assert_eq!(checkpoint_from_bytes(&bytes).unwrap(), s);
        assert_eq!(checkpoint_to_bytes(&checkpoint_from_bytes(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let spec = GraphSpec::parse(SPEC).unwrap();
        let bytes = checkpoint_to_bytes(&TrainState::init(&spec, 5).unwrap()).unwrap();
        let mut bad = bytes.clone();
        let k = bad.len() - 40;
        bad[k] ^= 0x10;
        assert!(matches!(checkpoint_from_bytes(&bad), Err(Error::Integrity { .. })));
        assert!(matches!(
            checkpoint_from_bytes(&bytes[..bytes.len() / 2]),
            Err(Error::UnexpectedEof { .. })
        ));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&magic), Err(Error::Format { .. })));
    }

    #[test]
    fn mismatched_spec_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.abck");
        let spec = GraphSpec::parse(SPEC).unwrap();
        save_checkpoint(&TrainState::init(&spec, 5).unwrap(), &path).unwrap();
        let wider = GraphSpec::parse(&SPEC.replace("n_out=2", "n_out=3")).unwrap();
        assert!(matches!(
            load_checkpoint_for(&path, &wider),
            Err(Error::CheckpointMismatch(_))
        ));
        load_checkpoint_for(&path, &spec).unwrap();
    }
}

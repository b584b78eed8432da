//! Trained speaker classifier: the x-vector network, its classification head
//! and the loss it was trained with, plus the on-disk checkpoint format.
//!
//! Layout (little-endian): magic `XVCK`, version u32, u32 header length and a
//! JSON header `{net, loss, tensors}` where `tensors` is the layer manifest.
//! Each manifest entry is followed in order by `rows u32, cols u32` and the
//! entries as row-major f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::binio::{write_matrix, Tracked};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, ProjectionLayer};
use crate::network::{NetConfig, XVectorNet};
use crate::numeric::{Matrix, Rng};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerModel {
    pub net: XVectorNet,
    pub head: ProjectionLayer,
    pub loss: LossConfig,
}

#[derive(Serialize, Deserialize)]
struct Header {
    net: NetConfig,
    loss: LossConfig,
    tensors: Vec<String>,
}

impl SpeakerModel {
    pub fn new(net_cfg: NetConfig, loss: LossConfig, classes: usize, rng: &mut Rng) -> Result<Self> {
        loss.validate()?;
        if classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {classes}")));
        }
        let net = XVectorNet::new(net_cfg, rng)?;
        let width = net.config().output_dim();
        let head = ProjectionLayer::new(width, classes, loss.kind, rng);
        Ok(SpeakerModel { net, head, loss })
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    fn tensors(&self) -> Vec<(String, Matrix)> {
        let mut t = self.net.state_tensors();
        t.push(("head.weight".into(), self.head.weight.clone()));
        if let Some(b) = &self.head.bias {
            t.push(("head.bias".into(), b.clone()));
        }
        t
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, model: &SpeakerModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn encode_checkpoint<W: Write>(w: &mut W, model: &SpeakerModel) -> Result<()> {
    let tensors = model.tensors();
    let header = Header {
        net: model.net.config().clone(),
        loss: model.loss,
        tensors: tensors.iter().map(|(n, _)| n.clone()).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::config(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(json.len() as u32)?;
    w.write_all(&json)?;
    for (_, m) in &tensors {
        write_matrix(w, m)?;
    }
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<SpeakerModel> {
    decode_checkpoint(BufReader::new(File::open(path)?))
}

pub fn decode_checkpoint<R: Read>(reader: R) -> Result<SpeakerModel> {
    let mut r = Tracked::new(reader);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32("header length")? as usize;
    let header_at = r.pos;
    let mut raw = vec![0u8; len];
    r.exact(&mut raw, "header")?;
    let header: Header = serde_json::from_slice(&raw).map_err(|e| Error::Format {
        offset: header_at,
        msg: format!("bad header: {e}"),
    })?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for name in header.tensors {
        let m = r.matrix(&name)?;
        tensors.push((name, m));
    }
    r.expect_end()?;
    let at = r.pos;
    let bad = |e: Error| Error::Format {
        offset: at,
        msg: e.to_string(),
    };

    header.loss.validate().map_err(bad)?;
    let mut net = XVectorNet::new(header.net, &mut Rng::new(0)).map_err(bad)?;
    let n_net = net.state_tensors().len();
    if tensors.len() < n_net + 1 {
        return Err(bad(Error::dim("checkpoint is missing tensors")));
    }
    let head_tensors = tensors.split_off(n_net);
    net.load_state_tensors(tensors).map_err(bad)?;

    let mut head_it = head_tensors.into_iter();
    let (wn, weight) = head_it.next().unwrap();
    let bias = head_it.next();
    if wn != "head.weight" || head_it.next().is_some() {
        return Err(bad(Error::config("unexpected head tensors")));
    }
    if weight.rows() != net.config().output_dim() {
        return Err(bad(Error::dim("head weight does not match network output")));
    }
    let bias = match (bias, header.loss.kind.has_bias()) {
        (Some((name, b)), true) if name == "head.bias" && b.shape() == (1, weight.cols()) => Some(b),
        (None, false) => None,
        _ => return Err(bad(Error::config("head bias does not match the loss kind"))),
    };
    Ok(SpeakerModel {
        net,
        head: ProjectionLayer { weight, bias },
        loss: header.loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossKind;
    use crate::network::Mode;

    fn trained_ish(kind: LossKind) -> SpeakerModel {
        let mut rng = Rng::new(9);
        let mut model = SpeakerModel::new(NetConfig::desk_scale(5), LossConfig::new(kind), 7, &mut rng).unwrap();
        let batch: Vec<Matrix> = (0..4).map(|_| Matrix::random_normal(30, 5, 1.0, &mut rng)).collect();
        model.net.forward(&batch, Mode::Train).unwrap();
        model
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in LossKind::ALL {
            let model = trained_ish(kind);
            let mut buf = Vec::new();
            encode_checkpoint(&mut buf, &model).unwrap();
            let back = decode_checkpoint(&buf[..]).unwrap();
            assert_eq!(back, model);
            let mut again = Vec::new();
            encode_checkpoint(&mut again, &back).unwrap();
            assert_eq!(buf, again);
        }
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let mut buf = Vec::new();
        encode_checkpoint(&mut buf, &trained_ish(LossKind::Softmax)).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(decode_checkpoint(&buf[..]), Err(Error::Format { .. })));
        assert!(matches!(decode_checkpoint(&b"XVCQ"[..]), Err(Error::Format { offset: 0, .. })));
    }
}

//! Binary checkpoints for tokenizers and generators.
//!
//! Tokenizer (`RTKTOK01`), all integers little-endian:
//!
//! ```text
//! magic          8 bytes  "RTKTOK01"
//! image_size     u32
//! channels       u32
//! patch_size     u32
//! hidden         u32
//! hidden_layers  u32
//! latent_dim     u32
//! codebook_size  u32
//! flags          u32      bit 0: post-trained decoder
//! teacher_seed   u64
//! step           u64
//! encoder        f64[]    per layer: weights (out × in, row-major), then bias
//! decoder        f64[]    same layout
//! codebook       f64[]    K × latent_dim, row-major
//! codebook block          the codebook file layout (RTKCBK01, K, dim, f32 values)
//! ```
//!
//! The f64 codebook is authoritative; the f32 block lets codebook tools read
//! a tokenizer checkpoint directly and must agree with it after rounding.
//!
//! Generator (`RTKGEN01`):
//!
//! ```text
//! magic    8 bytes  "RTKGEN01"
//! window   u32
//! embed    u32
//! hidden   u32
//! k        u32
//! grid     u32
//! classes  u32
//! token_embed, class_embed, pos_embed, then MLP layers as above, all f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codebook::Codebook;
use crate::error::{Result, RtkError};
use crate::generator::{GeneratorArch, GeneratorParams};
use crate::nn::Mlp;
use crate::tokenizer::{teacher_projection, TokenizerArch, TokenizerParams, TokenizerState};

pub const TOKENIZER_MAGIC: &[u8; 8] = b"RTKTOK01";
pub const GENERATOR_MAGIC: &[u8; 8] = b"RTKGEN01";
const FLAG_POST_TRAINED: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| RtkError::Format(format!("{v} does not fit a u32 header field")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn fill_f64s<R: Read>(r: &mut R, out: &mut [f64]) -> Result<()> {
    let mut b = [0u8; 8];
    for v in out.iter_mut() {
        r.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    Ok(())
}

fn check_magic<R: Read>(r: &mut R, magic: &[u8; 8], what: &str) -> Result<()> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(RtkError::Format(format!("not a {what} checkpoint")));
    }
    Ok(())
}

fn check_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(RtkError::Format("trailing bytes after checkpoint".into()));
    }
    Ok(())
}

fn put_mlp<W: Write>(w: &mut W, m: &Mlp) -> Result<()> {
    m.slices().into_iter().try_for_each(|s| put_f64s(w, s))
}

fn get_mlp<R: Read>(r: &mut R, dims: &[usize]) -> Result<Mlp> {
    let mut m = Mlp::zeros(dims);
    for s in m.slices_mut() {
        fill_f64s(r, s)?;
    }
    Ok(m)
}

pub fn write_tokenizer<W: Write>(state: &TokenizerState, mut w: W) -> Result<()> {
    let a = &state.arch;
    w.write_all(TOKENIZER_MAGIC)?;
    for v in [
        a.image_size,
        a.channels,
        a.patch_size,
        a.hidden,
        a.hidden_layers,
        a.latent_dim,
        a.codebook_size,
    ] {
        put_u32(&mut w, v)?;
    }
    let flags = if state.post_trained { FLAG_POST_TRAINED } else { 0 };
    w.write_all(&flags.to_le_bytes())?;
    w.write_all(&a.teacher_seed.to_le_bytes())?;
    w.write_all(&(state.step as u64).to_le_bytes())?;
    put_mlp(&mut w, &state.params.encoder)?;
    put_mlp(&mut w, &state.params.decoder)?;
    put_f64s(&mut w, state.params.codebook.entries())?;
    state.params.codebook.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_tokenizer<R: Read>(mut r: R) -> Result<TokenizerState> {
    check_magic(&mut r, TOKENIZER_MAGIC, "tokenizer")?;
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = get_u32(&mut r)?;
    }
    let [image_size, channels, patch_size, hidden, hidden_layers, latent_dim, codebook_size] = dims;
    let flags = get_u32(&mut r)? as u32;
    if flags & !FLAG_POST_TRAINED != 0 {
        return Err(RtkError::Format(format!("unknown tokenizer flags {flags:#x}")));
    }
    let arch = TokenizerArch {
        image_size,
        channels,
        patch_size,
        hidden,
        hidden_layers,
        latent_dim,
        codebook_size,
        teacher_seed: get_u64(&mut r)?,
    };
    arch.validate().map_err(|e| RtkError::Format(format!("bad tokenizer header: {e}")))?;
    let step = get_u64(&mut r)? as usize;
    let encoder = get_mlp(&mut r, &arch.encoder_dims())?;
    let decoder = get_mlp(&mut r, &arch.decoder_dims())?;
    let mut entries = vec![0.0; codebook_size * latent_dim];
    fill_f64s(&mut r, &mut entries)?;
    let codebook = Codebook::new(entries, codebook_size, latent_dim)?;
    let block = Codebook::read_from(&mut r)?;
    let agrees = block.k() == codebook.k()
        && block.dim() == codebook.dim()
        && block.entries().iter().zip(codebook.entries()).all(|(b, e)| *b == *e as f32 as f64);
    if !agrees {
        return Err(RtkError::Format("embedded codebook block disagrees with parameters".into()));
    }
    check_eof(&mut r)?;
    Ok(TokenizerState {
        teacher: teacher_projection(&arch),
        arch,
        params: TokenizerParams {
            encoder,
            decoder,
            codebook,
        },
        step,
        post_trained: flags & FLAG_POST_TRAINED != 0,
    })
}

pub fn write_generator<W: Write>(params: &GeneratorParams, mut w: W) -> Result<()> {
    let a = &params.arch;
    w.write_all(GENERATOR_MAGIC)?;
    for v in [a.window, a.embed, a.hidden, a.k, a.grid, a.classes] {
        put_u32(&mut w, v)?;
    }
    params.slices().into_iter().try_for_each(|s| put_f64s(&mut w, s))?;
    w.flush()?;
    Ok(())
}

pub fn read_generator<R: Read>(mut r: R) -> Result<GeneratorParams> {
    check_magic(&mut r, GENERATOR_MAGIC, "generator")?;
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = get_u32(&mut r)?;
    }
    let [window, embed, hidden, k, grid, classes] = dims;
    let arch = GeneratorArch {
        k,
        grid,
        classes,
        window,
        embed,
        hidden,
    };
    let mut params =
        GeneratorParams::zeros(arch).map_err(|e| RtkError::Format(format!("bad generator header: {e}")))?;
    for s in params.slices_mut() {
        fill_f64s(&mut r, s)?;
    }
    check_eof(&mut r)?;
    Ok(params)
}

pub fn save_tokenizer(state: &TokenizerState, path: &Path) -> Result<()> {
    write_tokenizer(state, BufWriter::new(File::create(path)?))
}

pub fn load_tokenizer(path: &Path) -> Result<TokenizerState> {
    read_tokenizer(BufReader::new(File::open(path)?))
}

pub fn save_generator(params: &GeneratorParams, path: &Path) -> Result<()> {
    write_generator(params, BufWriter::new(File::create(path)?))
}

pub fn load_generator(path: &Path) -> Result<GeneratorParams> {
    read_generator(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> TokenizerArch {
        TokenizerArch {
            image_size: 8,
            hidden: 6,
            latent_dim: 3,
            codebook_size: 5,
            ..Default::default()
        }
    }

    fn encoded(state: &TokenizerState) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tokenizer(state, &mut buf).unwrap();
        buf
    }

    #[test]
    fn tokenizer_roundtrip_is_bitwise() {
        let mut s = TokenizerState::random(small_arch(), 3).unwrap();
        s.step = 42;
        s.post_trained = true;
        let buf = encoded(&s);
        assert_eq!(&buf[..8], TOKENIZER_MAGIC);
        let back = read_tokenizer(buf.as_slice()).unwrap();
        assert_eq!(back, s);
        assert_eq!(encoded(&back), buf);
    }

    #[test]
    fn post_trained_flag_is_in_header() {
        let s = TokenizerState::random(small_arch(), 3).unwrap();
        let mut p = s.clone();
        p.post_trained = true;
        let (a, b) = (encoded(&s), encoded(&p));
        let diff: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        assert_eq!(diff, vec![8 + 7 * 4]);
        assert!(!read_tokenizer(a.as_slice()).unwrap().post_trained);
    }

    #[test]
    fn embedded_block_reads_as_codebook_file() {
        let s = TokenizerState::random(small_arch(), 9).unwrap();
        let buf = encoded(&s);
        let mut raw = Vec::new();
        s.params.codebook.write_to(&mut raw).unwrap();
        assert_eq!(&buf[buf.len() - raw.len()..], raw.as_slice());
        let cb = Codebook::read_from(&buf[buf.len() - raw.len()..]).unwrap();
        assert_eq!(cb.k(), 5);
    }

    #[test]
    fn rejects_corruption() {
        let s = TokenizerState::random(small_arch(), 1).unwrap();
        let buf = encoded(&s);
        assert!(read_tokenizer(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_tokenizer(extra.as_slice()).is_err());
        let mut magic = buf.clone();
        magic[0] = b'X';
        assert!(matches!(read_tokenizer(magic.as_slice()), Err(RtkError::Format(_))));
        let mut block = buf.clone();
        let last = block.len() - 1;
        block[last] ^= 0x40;
        assert!(read_tokenizer(block.as_slice()).is_err());
        assert!(read_generator(buf.as_slice()).is_err());
    }

    #[test]
    fn generator_roundtrip_is_bitwise() {
        let arch = GeneratorArch {
            k: 7,
            grid: 3,
            classes: 2,
            window: 4,
            embed: 3,
            hidden: 5,
        };
        let g = GeneratorParams::random(arch, 5).unwrap();
        let mut buf = Vec::new();
        write_generator(&g, &mut buf).unwrap();
        assert_eq!(&buf[..8], GENERATOR_MAGIC);
        assert_eq!(read_generator(buf.as_slice()).unwrap(), g);
        assert!(read_generator(&buf[..buf.len() - 8]).is_err());
    }

    #[test]
    fn files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = TokenizerState::random(small_arch(), 2).unwrap();
        let p = dir.path().join("tok.bin");
        save_tokenizer(&s, &p).unwrap();
        assert_eq!(load_tokenizer(&p).unwrap(), s);
    }
}

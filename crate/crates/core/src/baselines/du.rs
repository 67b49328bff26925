use crate::embed::{embed_forward, EmbedMode, Granularity};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};
use crate::vit::LN_EPS;

/// `C′ = round(d_tar·C)`, at least 1.
pub fn du_kernels(d_tar: f64, c: usize) -> Result<usize> {
    let k = (d_tar * c as f64).round() as usize;
    if k < 1 {
        return Err(Error::invalid(format!(
            "rate {d_tar} leaves no kernels out of {c}"
        )));
    }
    Ok(k)
}

/// Reduced-kernel embedding, `1×1` mix up to `C`, then layer norm.
#[allow(clippy::too_many_arguments)]
pub fn du_embed<T: Real>(
    tape: &mut Tape<T>,
    patches: Var,
    w: Var,
    v: Var,
    mix: (Var, Var),
    norm: (Var, Var),
    mode: EmbedMode,
    gran: Granularity,
) -> Result<Var> {
    let y = embed_forward(tape, patches, w, v, mode, gran)?;
    du_mix(tape, y, mix, norm)
}

/// The `1×1` mix and layer norm applied to an acquired `R×C′` embedding.
pub fn du_mix<T: Real>(tape: &mut Tape<T>, y: Var, mix: (Var, Var), norm: (Var, Var)) -> Result<Var> {
    let y = tape.matmul(y, mix.0)?;
    let y = tape.add_row(y, mix.1)?;
    tape.layernorm(y, norm.0, norm.1, T::of(LN_EPS))
}

//! Parser for the textual architecture grammar:
//!
//! ```text
//! Input -> C(3,16,3,1) -> BR -> Iterate(16,32,3,2,2,4) -> Iterate(32,64,3,2,2,4) -> Avg(4,1) -> FC(64,12)
//! ```
//!
//! `C(fi,fo,k,s)` is the stem convolution (followed by `BR`, batch norm +
//! ReLU), `Iterate(fi,fo,k,s,n,t)` a ConvLSTM module with Stack-`n` gates
//! iterated `t` times, `Avg(k,s)` average pooling and `FC(fi,fo)` the
//! classifier. Elements are separated by `->` or `→`.

use super::{ConvSpec, FeedbackNetSpec, LossMode, ModuleSpec, PoolSpec, SkipPlacement, SkipSpec};
use crate::error::{Error, Result};

fn parse_call(token: &str) -> Result<(&str, Vec<usize>)> {
    let token = token.trim();
    let Some(open) = token.find('(') else {
        return Ok((token, Vec::new()));
    };
    if !token.ends_with(')') {
        return Err(Error::config(format!("unbalanced parentheses in `{token}`")));
    }
    let name = token[..open].trim();
    let args = token[open + 1..token.len() - 1]
        .split(',')
        .map(|a| {
            a.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad integer `{}` in `{token}`", a.trim())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((name, args))
}

fn expect_args(name: &str, args: &[usize], n: usize) -> Result<()> {
    if args.len() != n {
        return Err(Error::config(format!(
            "{name} takes {n} arguments, got {}",
            args.len()
        )));
    }
    Ok(())
}

/// Builds a network spec from an architecture string. Skip length 2 on the
/// module outputs, γ = 1 and gate-stack residuals are the defaults; callers
/// override them afterwards.
pub fn parse_architecture(text: &str, image_size: usize) -> Result<FeedbackNetSpec> {
    let normalized = text.replace('→', "->");
    let mut stem: Option<ConvSpec> = None;
    let mut modules = Vec::new();
    let mut iterations: Option<usize> = None;
    let mut pool: Option<PoolSpec> = None;
    let mut fc: Option<(usize, usize)> = None;

    for token in normalized.split("->").map(str::trim).filter(|t| !t.is_empty()) {
        let (name, args) = parse_call(token)?;
        match name {
            "Input" | "BR" => expect_args(name, &args, 0)?,
            "C" => {
                expect_args(name, &args, 4)?;
                if stem.is_some() || !modules.is_empty() {
                    return Err(Error::config("only a single stem convolution before the modules is supported"));
                }
                stem = Some(ConvSpec {
                    in_channels: args[0],
                    out_channels: args[1],
                    kernel: args[2],
                    stride: args[3],
                });
            }
            "Iterate" => {
                expect_args(name, &args, 6)?;
                if pool.is_some() {
                    return Err(Error::config("Iterate after pooling"));
                }
                match iterations {
                    Some(t) if t != args[5] => {
                        return Err(Error::config(format!(
                            "all modules must iterate the same number of times ({t} vs {})",
                            args[5]
                        )))
                    }
                    _ => iterations = Some(args[5]),
                }
                modules.push(ModuleSpec {
                    in_channels: args[0],
                    out_channels: args[1],
                    kernel: args[2],
                    stride: args[3],
                    stack: args[4],
                });
            }
            "Avg" => {
                expect_args(name, &args, 2)?;
                pool = Some(PoolSpec {
                    kernel: args[0],
                    stride: args[1],
                });
            }
            "FC" => {
                expect_args(name, &args, 2)?;
                fc = Some((args[0], args[1]));
            }
            other => return Err(Error::config(format!("unknown architecture element `{other}`"))),
        }
    }

    let stem = stem.ok_or_else(|| Error::config("architecture lacks a stem C(fi,fo,k,s)"))?;
    let iterations = iterations.ok_or_else(|| Error::config("architecture lacks an Iterate module"))?;
    let pool = pool.ok_or_else(|| Error::config("architecture lacks an Avg(k,s) pooling layer"))?;
    let (fc_in, num_classes) = fc.ok_or_else(|| Error::config("architecture lacks an FC(fi,fo) layer"))?;
    let spec = FeedbackNetSpec {
        image_size,
        stem,
        modules,
        iterations,
        skip: Some(SkipSpec {
            length: 2,
            placement: SkipPlacement::Output,
        }),
        gamma: 1.0,
        pool,
        num_classes,
        residual: true,
        loss_mode: LossMode::AllIterations,
    };
    spec.validate()?;
    if spec.feature_len() != fc_in {
        return Err(Error::config(format!(
            "FC expects {fc_in} inputs but pooling yields {}",
            spec.feature_len()
        )));
    }
    Ok(spec)
}

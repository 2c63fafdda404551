//! Policy spec strings: `scripted:<file>`, `tabular:<file>`,
//! `stochastic_scripted:<file>:<p_success>`. The file name `gt` stands for
//! the ground-truth scripted policy.

use std::path::Path;

use anyhow::{anyhow, bail, Context as _, Result};
use evoloop_core::policy::{PolicyHandle, ScriptedPolicy, StochasticScripted, TabularPolicy};

use crate::formats::read_json;

fn scripted(file: &str) -> Result<ScriptedPolicy> {
    if file == "gt" {
        Ok(ScriptedPolicy::ground_truth())
    } else {
        read_json(Path::new(file))
    }
}

pub fn parse_policy_spec(spec: &str) -> Result<PolicyHandle> {
    let (kind, rest) = spec.split_once(':').ok_or_else(|| anyhow!("policy spec `{spec}` has no `kind:` prefix"))?;
    let handle = match kind {
        "scripted" => PolicyHandle::Scripted(scripted(rest)?),
        "tabular" => PolicyHandle::Tabular(read_json::<TabularPolicy>(Path::new(rest))?),
        "stochastic_scripted" => {
            let (file, p) = rest
                .rsplit_once(':')
                .ok_or_else(|| anyhow!("stochastic_scripted spec needs `<file>:<p_success>`"))?;
            let p: f64 = p.parse().with_context(|| format!("bad p_success `{p}`"))?;
            PolicyHandle::StochasticScripted(StochasticScripted::new(scripted(file)?, p))
        }
        other => bail!("unknown policy kind `{other}`"),
    };
    handle.validate().map_err(|e| anyhow!("policy `{spec}`: {e}"))?;
    Ok(handle)
}

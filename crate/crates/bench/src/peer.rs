//! Entry point for `rpcool-bench peer <role>`.

pub fn run(role: &str, args: &[String]) -> anyhow::Result<()> {
    match role {
        "echo" => crate::echo::peer(args),
        "coherence" => crate::coherence::peer(args),
        "alloc" => crate::alloctrace::peer(args),
        "holder" => crate::governance::holder(args),
        "cooldb" => crate::cooldb::peer(args),
        _ => anyhow::bail!("unknown peer role {role:?}"),
    }
}

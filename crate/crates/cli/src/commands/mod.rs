pub mod analyze;
pub mod ckpt;
pub mod schedule;
pub mod verify;

use anyhow::Result;

use crate::args::Common;
use crate::usage;

/// Checks the shared flags that every command relies on.
pub fn check_common(c: &Common) -> Result<()> {
    if c.p == 0 || c.n == 0 || c.d == 0 {
        return Err(usage!("--P, --N and --d must be positive"));
    }
    if !c.n.is_multiple_of(c.p) {
        return Err(usage!("--N {} is not divisible by --P {}", c.n, c.p));
    }
    if c.heads == 0 || c.kv_heads == 0 || !c.heads.is_multiple_of(c.kv_heads) {
        return Err(usage!(
            "--heads {} must be a positive multiple of --kv-heads {}",
            c.heads,
            c.kv_heads
        ));
    }
    if c.br == 0 || c.bc == 0 {
        return Err(usage!("--br and --bc must be positive"));
    }
    Ok(())
}

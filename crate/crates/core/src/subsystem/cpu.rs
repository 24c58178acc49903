//! Thread register state.
//!
//! One entity per thread, in tid order:
//!
//! ```text
//! tid (u32) | register_count (u16) | registers (register_count × u64)
//! ```

use std::sync::Arc;

use crate::guest::{GuestError, GuestProcess, ThreadContext, Tid, REGISTER_COUNT};
use crate::medium::ChunkKind;

use super::{
    ChunkSink, ChunkSource, PayloadReader, StepContext, StepReport, SubsystemDescriptor,
    SubsystemError, SubsystemOps,
};

pub const ORDER_KEY: i32 = 10;
pub const VERSION: u32 = 1;

pub fn descriptor() -> SubsystemDescriptor {
    SubsystemDescriptor::new("cpu", VERSION, ORDER_KEY, Arc::new(CpuSubsystem))
}

pub fn encode_thread(t: &ThreadContext) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * REGISTER_COUNT);
    out.extend_from_slice(&t.tid.0.to_be_bytes());
    out.extend_from_slice(&(REGISTER_COUNT as u16).to_be_bytes());
    for r in &t.registers {
        out.extend_from_slice(&r.to_be_bytes());
    }
    out
}

#[derive(Debug, Default)]
struct Cursor {
    next: usize,
}

#[derive(Debug, Default)]
pub struct CpuSubsystem;

impl SubsystemOps for CpuSubsystem {
    fn checkpoint(
        &self,
        ctx: &mut StepContext,
        process: &mut GuestProcess,
        sink: &mut dyn ChunkSink,
    ) -> Result<StepReport, SubsystemError> {
        let mut cur = ctx.take_state::<Cursor>();
        let mut n = 0;
        let result = (|| {
            while cur.next < process.threads.len() && n < ctx.batch_limit as u64 {
                let t = &process.threads[cur.next];
                ctx.emit(sink, ChunkKind::Entity, encode_thread(t))?;
                ctx.last_entity = Some(format!("thread {}", t.tid.0));
                ctx.entities_done += 1;
                cur.next += 1;
                n += 1;
            }
            Ok(StepReport::processed(n, cur.next >= process.threads.len()))
        })();
        ctx.put_state(cur);
        result
    }

    fn restart(
        &self,
        ctx: &mut StepContext,
        process: &mut GuestProcess,
        source: &mut dyn ChunkSource,
    ) -> Result<StepReport, SubsystemError> {
        let mut n = 0;
        while let Some(chunk) = source.next()? {
            ctx.expect_sequence(&chunk)?;
            match chunk.kind {
                ChunkKind::Entity => {
                    let mut r = PayloadReader::new(&chunk.payload);
                    let parsed = (|| {
                        let tid = r.u32()?;
                        let count = r.u16()? as usize;
                        if count != REGISTER_COUNT {
                            return Err(format!("{count} registers, expected {REGISTER_COUNT}"));
                        }
                        let mut regs = [0u64; REGISTER_COUNT];
                        for reg in regs.iter_mut() {
                            *reg = r.u64()?;
                        }
                        r.finish()?;
                        Ok(ThreadContext::new(Tid(tid), regs))
                    })();
                    let t = parsed.map_err(|e| ctx.malformed(&chunk, e))?;
                    if process.threads.iter().any(|x| x.tid == t.tid) {
                        return Err(ctx.malformed(&chunk, format!("duplicate tid {}", t.tid.0)));
                    }
                    ctx.last_entity = Some(format!("thread {}", t.tid.0));
                    process.threads.push(t);
                    ctx.entities_done += 1;
                    n += 1;
                }
                ChunkKind::EndOfSubsystem => {
                    if process.threads.is_empty() {
                        return Err(GuestError::ZeroThreads.into());
                    }
                    return Ok(StepReport::processed(n, true));
                }
                other => {
                    return Err(ctx.malformed(&chunk, format!("unexpected {other:?} chunk")));
                }
            }
        }
        Ok(StepReport::processed(n, false))
    }

    fn estimate(&self, _ctx: &StepContext, process: &GuestProcess) -> u64 {
        process.threads.len() as u64
    }
}

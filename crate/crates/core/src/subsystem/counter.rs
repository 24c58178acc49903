//! A sample third-party module: a per-process event counter kept in the
//! guest's extension state under the key `counter`.
//!
//! One entity when the counter exists: `value (u64)`.

use std::sync::Arc;

use crate::guest::GuestProcess;
use crate::medium::ChunkKind;

use super::{
    ChunkSink, ChunkSource, PayloadReader, StepContext, StepReport, SubsystemDescriptor,
    SubsystemError, SubsystemOps,
};

pub const KEY: &str = "counter";
pub const ORDER_KEY: i32 = 100;
pub const VERSION: u32 = 1;

pub fn descriptor() -> SubsystemDescriptor {
    SubsystemDescriptor::new(KEY, VERSION, ORDER_KEY, Arc::new(CounterSubsystem))
}

pub fn value(process: &GuestProcess) -> Option<u64> {
    process
        .extensions
        .get(KEY)
        .and_then(|v| v.as_slice().try_into().ok())
        .map(u64::from_be_bytes)
}

pub fn increment(process: &mut GuestProcess, by: u64) -> u64 {
    let v = value(process).unwrap_or(0).wrapping_add(by);
    process.extensions.insert(KEY.into(), v.to_be_bytes().to_vec());
    v
}

#[derive(Debug, Default)]
struct Sent(bool);

#[derive(Debug, Default)]
pub struct CounterSubsystem;

impl SubsystemOps for CounterSubsystem {
    fn checkpoint(
        &self,
        ctx: &mut StepContext,
        process: &mut GuestProcess,
        sink: &mut dyn ChunkSink,
    ) -> Result<StepReport, SubsystemError> {
        let mut sent = ctx.take_state::<Sent>();
        let mut n = 0;
        let mut result = Ok(());
        if !sent.0 {
            if let Some(v) = value(process) {
                match ctx.emit(sink, ChunkKind::Entity, v.to_be_bytes().to_vec()) {
                    Ok(()) => {
                        ctx.entities_done += 1;
                        ctx.last_entity = Some(format!("counter = {v}"));
                        n = 1;
                        sent.0 = true;
                    }
                    Err(e) => result = Err(e.into()),
                }
            } else {
                sent.0 = true;
            }
        }
        let done = sent.0;
        ctx.put_state(sent);
        result.map(|_| StepReport::processed(n, done))
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
                    let v = r
                        .u64()
                        .and_then(|v| r.finish().map(|_| v))
                        .map_err(|e| ctx.malformed(&chunk, e))?;
                    process.extensions.insert(KEY.into(), v.to_be_bytes().to_vec());
                    ctx.entities_done += 1;
                    n += 1;
                }
                ChunkKind::EndOfSubsystem => return Ok(StepReport::processed(n, true)),
                other => {
                    return Err(ctx.malformed(&chunk, format!("unexpected {other:?} chunk")))
                }
            }
        }
        Ok(StepReport::processed(n, false))
    }

    fn estimate(&self, _ctx: &StepContext, process: &GuestProcess) -> u64 {
        value(process).is_some() as u64
    }
}

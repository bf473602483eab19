//! The tensor-container parser must return Ok or Err on arbitrary bytes,
//! never panic or overallocate.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = tpt::autodiff::checkpoint::parse_tensors(data);
});

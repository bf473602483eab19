//! Split files come from disk; the parser must reject anything malformed
//! without panicking.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = tpt::data::parse_split(data);
});

//! Config text is user-written; parsing must fail with a line-numbered
//! error, never a panic.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = tpt::config::parse_config_text(text);
});

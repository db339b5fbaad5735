use proptest::prelude::*;
use twinmarl_twin::protocol::{LineBuffer, Payload, SeqGuard, TwinSyncMessage};

fn payload() -> impl Strategy<Value = Payload> {
    let f = -1e6f64..1e6;
    prop_oneof![
        (0u32..5, "[a-z]{0,8}").prop_map(|(version, role)| Payload::Hello { version, role }),
        (f.clone(), f.clone(), f.clone(), f).prop_map(|(x, y, yaw, v)| Payload::StateEstimate { x, y, yaw, v }),
        (any::<u64>(), 0usize..3, 0usize..3, any::<bool>()).prop_map(|(reply_to, throttle_index, steer_index, active)| Payload::ActionCommand {
            reply_to,
            throttle_index,
            steer_index,
            active
        }),
        (any::<u64>(), any::<u64>()).prop_map(|(tick, episode)| Payload::TickAck { tick, episode, reset: None }),
        "[ -~]{0,20}".prop_map(|reason| Payload::Bye { reason }),
    ]
}

proptest! {
    #[test]
    fn encode_decode_roundtrip(agent_id in 0usize..8, seq in any::<u64>(), sent_ns in any::<u64>(), payload in payload()) {
        let m = TwinSyncMessage { agent_id, seq, sent_ns, payload };
        let line = m.encode();
        prop_assert_eq!(line.matches('\n').count(), 1);
        prop_assert_eq!(TwinSyncMessage::decode(&line).unwrap(), m);
    }

    #[test]
    fn framing_survives_any_chunking(payloads in proptest::collection::vec(payload(), 1..10), cuts in proptest::collection::vec(1usize..40, 1..50)) {
        let msgs: Vec<TwinSyncMessage> = payloads.into_iter().enumerate().map(|(i, payload)| TwinSyncMessage { agent_id: 0, seq: i as u64, sent_ns: 0, payload }).collect();
        let bytes: Vec<u8> = msgs.iter().flat_map(|m| m.encode().into_bytes()).collect();
        let mut buf = LineBuffer::default();
        let mut got = Vec::new();
        let mut at = 0;
        for c in cuts.iter().cycle() {
            if at >= bytes.len() { break; }
            let end = (at + c).min(bytes.len());
            buf.push(&bytes[at..end]);
            at = end;
            while let Some(l) = buf.next_line() {
                got.push(TwinSyncMessage::decode(&l.unwrap()).unwrap());
            }
        }
        prop_assert_eq!(got, msgs);
    }

    #[test]
    fn guard_accepts_exactly_the_running_maxima(seqs in proptest::collection::vec(0u64..50, 0..60)) {
        let mut g = SeqGuard::default();
        let mut best: Option<u64> = None;
        for s in seqs {
            let fresh = best.is_none_or(|b| s > b);
            prop_assert_eq!(g.accept(s).is_ok(), fresh);
            if fresh { best = Some(s); }
        }
    }
}

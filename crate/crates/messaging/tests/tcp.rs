use std::time::{Duration, Instant};

use edgetwin_core::Timestamp;
use edgetwin_messaging::{command, Broker, BrokerServer, Bus, Frame, FrameType, RemoteBus, RoutingKey};
use serde_json::json;

const T: Duration = Duration::from_secs(5);

fn measurement(sensor: &str, seq: u64) -> Frame {
    Frame::new(
        RoutingKey::sensor("edge1", sensor).unwrap(),
        Timestamp(seq as i64),
        FrameType::Measurement,
        json!({ "seq": seq }),
    )
}

#[test]
fn remote_publish_reaches_local_and_remote_subscribers() {
    let broker = Broker::new();
    let server = BrokerServer::bind("127.0.0.1:0", broker.clone()).unwrap();
    let publisher = RemoteBus::connect(server.local_addr()).unwrap();
    let listener = RemoteBus::connect(server.local_addr()).unwrap();

    let local = broker.subscribe("edge.*.sensors.*".parse().unwrap()).unwrap();
    let a = listener.subscribe("edge.edge1.sensors.*".parse().unwrap()).unwrap();
    let b = listener.subscribe("edge.*.sensors.V1".parse().unwrap()).unwrap();

    assert_eq!(publisher.publish(measurement("V1", 1)).unwrap(), 3);
    assert_eq!(publisher.publish(measurement("V2", 2)).unwrap(), 2);

    assert_eq!(local.recv_timeout(T).unwrap(), measurement("V1", 1));
    assert_eq!(a.recv_timeout(T).unwrap().payload["seq"], 1);
    assert_eq!(a.recv_timeout(T).unwrap().payload["seq"], 2);
    assert_eq!(b.recv_timeout(T).unwrap().payload["seq"], 1);
    assert!(b.recv_timeout(Duration::from_millis(100)).is_err());

    drop(b);
    assert_eq!(publisher.publish(measurement("V1", 3)).unwrap(), 2);
}

#[test]
fn remote_fifo_order() {
    let broker = Broker::new();
    let server = BrokerServer::bind("127.0.0.1:0", broker.clone()).unwrap();
    let publisher = RemoteBus::connect(server.local_addr()).unwrap();
    let sub = broker.subscribe("edge.*.sensors.*".parse().unwrap()).unwrap();
    for i in 0..200 {
        publisher.publish(measurement("V1", i)).unwrap();
    }
    for i in 0..200 {
        assert_eq!(sub.recv_timeout(T).unwrap().payload["seq"], i);
    }
}

#[test]
fn actuation_round_trip_and_disconnect() {
    let broker = Broker::new();
    let server = BrokerServer::bind("127.0.0.1:0", broker.clone()).unwrap();
    let edge = RemoteBus::connect(server.local_addr()).unwrap();
    let cloud = RemoteBus::connect(server.local_addr()).unwrap();

    let consumer = edge.bind_actuation("edge1").unwrap();
    let start = Instant::now();
    let ack = cloud.send_actuation("edge1", "Switch", command("open"), Timestamp::ZERO).unwrap();
    assert!(ack.delivered);
    let f = consumer.recv_timeout(T).unwrap();
    assert!(start.elapsed() < Duration::from_millis(100));
    assert_eq!(f.key.as_actuator(), Some(("edge1", "Switch")));
    assert_eq!(f.payload["action"], "open");

    drop(consumer);
    drop(edge);
    let deadline = Instant::now() + T;
    while broker.has_consumer("edge1") && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    let ack = cloud.send_actuation("edge1", "Switch", command("open"), Timestamp::ZERO).unwrap();
    assert!(!ack.delivered);
}

#[test]
fn unreachable_broker() {
    let mut server = BrokerServer::bind("127.0.0.1:0", Broker::new()).unwrap();
    let addr = server.local_addr();
    let bus = RemoteBus::connect(addr).unwrap();
    server.shutdown();
    let deadline = Instant::now() + T;
    while bus.is_connected() && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    assert!(bus.publish(measurement("V1", 0)).is_err());
    assert!(RemoteBus::connect_with_retry(addr, 2, Duration::from_millis(10)).is_err());
}

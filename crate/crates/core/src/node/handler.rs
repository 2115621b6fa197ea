use std::net::SocketAddr;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use async_trait::async_trait;

use crate::wire::frame::DeliveryMode;
use crate::wire::{ConnInfo, Frame, Handler, Message, StreamOut, StreamRequest, WireError, PROTOCOL_VERSION};

use super::delivery::{self, Delivered};
use super::{now_us, NodeShared};

pub(crate) struct NodeHandler {
    shared: Arc<NodeShared>,
}

impl NodeHandler {
    pub fn new(shared: Arc<NodeShared>) -> Self {
        NodeHandler { shared }
    }
}

#[async_trait]
impl Handler for NodeHandler {
    async fn admit(&self, _peer: SocketAddr) -> bool {
        self.shared.work.connections_accepted.fetch_add(1, Ordering::Relaxed);
        true
    }

    async fn handle(&self, request: Frame, conn: &ConnInfo) -> Frame {
        let shared = &self.shared;
        let id = request.id;
        match request.message {
            Message::Hello { version } if version == PROTOCOL_VERSION => Frame::new(
                id,
                Message::Hello {
                    version: PROTOCOL_VERSION.into(),
                },
            ),
            Message::Hello { version } => Frame::error(
                id,
                "VERSION_MISMATCH",
                format!("protocol version {version:?} is not {PROTOCOL_VERSION:?}"),
            ),
            Message::Register(reg) => {
                let node_id = reg.node_id.clone();
                match shared.register_peer(reg) {
                    Ok(sensors) => Frame::new(id, Message::RegisterAck { node_id, sensors }),
                    Err(why) => Frame::error(id, "BAD_REQUEST", why),
                }
            }
            Message::ListSensors => Frame::new(
                id,
                Message::SensorList {
                    sensors: shared.sensor_infos(),
                },
            ),
            Message::Query(q) => match shared.enqueue(Some(id.clone()), q, conn.peer.to_string()) {
                Ok((_, rx)) => rx
                    .await
                    .unwrap_or_else(|_| Frame::error(id, "BAD_REQUEST", "query was dropped")),
                Err(e) => Frame::error(id, e.code(), e.to_string()),
            },
            Message::Subscribe(req) => match shared.subscribe(req) {
                Ok(sub) => Frame::new(id, Message::SubscribeAck(sub)),
                Err(e) => Frame::error(id, e.code(), e.to_string()),
            },
            Message::Deliver { subscription, element } => {
                if conn.requests.load(Ordering::Relaxed) == 1 {
                    if let Some(agg) = shared.aggregator.lock().as_mut() {
                        agg.push_connections += 1;
                    }
                }
                if let Some(t) = &shared.throttle {
                    if !t.try_acquire() {
                        shared.work.connections_rejected.fetch_add(1, Ordering::Relaxed);
                        return Frame::error(id, "BUSY", "no capacity, retry later");
                    }
                }
                let seq = element.seq;
                shared.inbox.accept(Delivered {
                    subscription: subscription.clone(),
                    element,
                    gap: request.gap.unwrap_or(0),
                    received_us: now_us(),
                    via: DeliveryMode::Push,
                });
                Frame::new(id, Message::DeliverAck { subscription, seq })
            }
            Message::Status(_) => Frame::new(id, Message::Status(Box::new(shared.status()))),
            other => Frame::error(
                id,
                "BAD_REQUEST",
                format!("{} is a response, not a request", other.frame_type().as_str()),
            ),
        }
    }

    async fn stream(&self, request: StreamRequest, conn: &ConnInfo, out: StreamOut<'_>) -> Result<(), WireError> {
        delivery::serve_stream(&self.shared, request, conn, out).await
    }
}

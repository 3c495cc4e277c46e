export { FrameDecoder, ProtocolError, encodeExec } from "./protocol.js";
export type { Frame } from "./protocol.js";
export { TableData } from "./table.js";
export type { Column } from "./table.js";
export { Session, ServerError } from "./session.js";
export type { Value, SessionOptions } from "./session.js";

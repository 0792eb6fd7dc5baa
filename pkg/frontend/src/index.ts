export { Pair, decodeValue, encodeValue, valuesEqual } from "./tlv.js";
export type { Value } from "./tlv.js";
export {
  IgnisClient,
  METHOD_IDS,
  PROTOCOL_VERSION,
  ProtocolVersionError,
  RemoteError,
  lambdaSource,
  registrySource,
} from "./client.js";
export type { Handle, Source } from "./client.js";

export * from "./types.js";
export * from "./view.js";
export * from "./overlay.js";
export * from "./throttle.js";
export * from "./frames.js";
export * from "./client.js";
export * from "./tools.js";
export { EditorApp } from "./app.js";

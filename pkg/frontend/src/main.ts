import { ApiClient } from "./api.js";
import { App } from "./app.js";

const raterId =
  new URLSearchParams(window.location.search).get("rater") ?? "anonymous";
const root = document.getElementById("app");
if (!root) throw new Error("missing #app mount point");
void new App(new ApiClient(raterId), root).start();

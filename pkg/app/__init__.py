import json
import sys

import uvicorn # type: ignore
from starlette.applications import Starlette # type: ignore
from starlette.routing import Mount, Route # type: ignore
from mcp.server import Server # type: ignore
from mcp.server.sse import SseServerTransport # type: ignore
from starlette.requests import Request # type: ignore

# Import the main mcp instance from app.modules
from app.modules import mcp, configure_logging

# Import all tools to ensure they are registered with MCP
from app.modules.ingest import ingest_parse_sheet
from app.modules.features import features_describe_region
from app.modules.textual_linker import linker_retrieve_candidates
from app.modules.visual_linker import visual_probability_map
from app.modules.consensus import consensus_link_sheet
from app.modules.phrase_graph import phrases_from_edges
from app.modules.geolocalizer import geolocalizer_geocode, geolocalizer_locate_sheet
from app.modules.linked_metadata import metadata_match_phrase, metadata_query_maps
from app.modules.eval_harness import eval_sheet
from app.modules.synth import synth_generate_corpus
from app.modules.cli import build_parser, execute, pipeline_run


def create_starlette_app(mcp_server: Server, *, debug: bool = False) -> Starlette:
    """Create a Starlette application that can serve the provided mcp server with SSE."""
    sse = SseServerTransport("/messages/")

    async def handle_sse(request: Request) -> None:
        async with sse.connect_sse(
            request.scope,
            request.receive,
            request._send,  # noqa: SLF001
        ) as (read_stream, write_stream):
            await mcp_server.run(
                read_stream,
                write_stream,
                mcp_server.create_initialization_options(),
            )

    return Starlette(
        debug=debug,
        routes=[
            Route("/sse", endpoint=handle_sse),
            Mount("/messages/", app=sse.handle_post_message),
        ],
    )


def serve(args) -> None:
    # Logs go to stderr, stdout belongs to the stdio transport
    print(f"Starting map metadata MCP server with {args.transport} transport...", file=sys.stderr)
    print("Set MAPMETA_GAZETTEER or MAPMETA_GEOCODER_URL for geocoding", file=sys.stderr)

    if args.transport == 'stdio':
        mcp.run(transport='stdio')
    else:
        mcp_server = mcp._mcp_server  # Access the underlying MCP server
        starlette_app = create_starlette_app(mcp_server, debug=args.debug)
        print(f"Starting SSE server on http://{args.host}:{args.port}", file=sys.stderr)
        print("Access the SSE endpoint at /sse", file=sys.stderr)
        uvicorn.run(starlette_app, host=args.host, port=args.port)


def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.debug)

    if args.command == 'serve':
        serve(args)
        return

    result = execute(args)
    if args.json:
        print(json.dumps({"exit_code": result.exit_code, **result.summary}, indent=2, sort_keys=True))
    else:
        for key, value in result.summary.items():
            if key == "sheets":
                for sheet in value:
                    line = f"{sheet['source']}: {sheet['status']}"
                    if sheet.get("error"):
                        line += f" ({sheet['error']})"
                    print(line)
            else:
                print(f"{key}: {value}")
    sys.exit(result.exit_code)


if __name__ == "__main__":
    run()

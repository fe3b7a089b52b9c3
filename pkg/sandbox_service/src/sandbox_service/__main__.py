import os

import uvicorn


def main():
    uvicorn.run("sandbox_service.service:app",
                host=os.environ.get("SANDBOX_HOST", "127.0.0.1"),
                port=int(os.environ.get("SANDBOX_PORT", "8400")))


if __name__ == "__main__":
    main()

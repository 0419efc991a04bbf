from wisdomnet.cli import main

main()
